//! Conditioning-signal preprocessing, chunk alignment, splits, the synthetic
//! paired corpus, and corpus files.
//!
//! Preprocessing runs in two places. Channel exclusion and baseline centering
//! act on whole recordings; robust scaling and std clamping act on each chunk
//! (statistics are per chunk). [`preprocess`] applies all four steps to
//! whatever it is given.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndcore::{Container, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Channels × steps at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    /// `[channels, steps]`
    pub signal: Tensor<f32>,
    pub rate: f64,
    pub subject: usize,
    pub track: usize,
}

impl RawRecording {
    pub fn new(signal: Tensor<f32>, rate: f64, subject: usize, track: usize) -> Result<Self> {
        if signal.rank() != 2 || signal.is_empty() {
            return Err(Error::Data(format!("recording must be [channels, steps], got {:?}", signal.shape())));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Data(format!("sampling rate must be positive, got {rate}")));
        }
        Ok(Self { signal, rate, subject, track })
    }

    pub fn channels(&self) -> usize {
        self.signal.dim(0)
    }

    pub fn steps(&self) -> usize {
        self.signal.dim(1)
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 / self.rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Channel count before exclusion.
    pub channels: usize,
    pub excluded: Vec<usize>,
    pub baseline_steps: usize,
    pub clamp_std: f64,
    pub quantiles: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { channels: 20, excluded: vec![16, 17, 18, 19], baseline_steps: 1000, clamp_std: 20.0, quantiles: (0.25, 0.75) }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_std > 0.0) {
            return Err(Error::Config(format!("clamp multiple must be > 0, got {}", self.clamp_std)));
        }
        let (lo, hi) = self.quantiles;
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid quantile pair ({lo}, {hi})")));
        }
        if self.baseline_steps == 0 {
            return Err(Error::Config("baseline window must be at least one step".into()));
        }
        if let Some(&c) = self.excluded.iter().find(|&&c| c >= self.channels) {
            return Err(Error::Config(format!("excluded channel {c} out of range for {} channels", self.channels)));
        }
        Ok(())
    }

    pub fn kept_channels(&self) -> usize {
        (0..self.channels).filter(|c| !self.excluded.contains(c)).count()
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

fn rows(t: &Tensor<f32>) -> impl Iterator<Item = &[f32]> {
    t.data().chunks(t.dim(1))
}

/// Steps 1 and 2: drop excluded channels, subtract each channel's mean over
/// the first `baseline_steps` steps.
pub fn exclude_and_center(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<RawRecording> {
    cfg.validate()?;
    if rec.channels() != cfg.channels {
        return Err(Error::Data(format!("recording has {} channels, config expects {}", rec.channels(), cfg.channels)));
    }
    if rec.steps() <= cfg.baseline_steps {
        return Err(Error::Data(format!(
            "recording of {} steps is not longer than the {}-step baseline window",
            rec.steps(),
            cfg.baseline_steps
        )));
    }
    let kept = cfg.kept_channels();
    if kept == 0 {
        return Err(Error::Data("every channel is excluded".into()));
    }
    let mut out = Vec::with_capacity(kept * rec.steps());
    for (c, row) in rows(&rec.signal).enumerate() {
        if cfg.excluded.contains(&c) {
            continue;
        }
        let base = row[..cfg.baseline_steps].iter().map(|&v| v as f64).sum::<f64>() / cfg.baseline_steps as f64;
        out.extend(row.iter().map(|&v| (v as f64 - base) as f32));
    }
    Ok(RawRecording { signal: Tensor::new(vec![kept, rec.steps()], out)?, ..*rec })
}

/// Step 3: per channel `(v − median) / (q_hi − q_lo)`, divisor 1 when the
/// spread is zero.
pub fn robust_scale(x: &Tensor<f32>, quantiles: (f64, f64)) -> Result<Tensor<f32>> {
    check_matrix(x)?;
    let mut out = Vec::with_capacity(x.len());
    for row in rows(x) {
        let mut s: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let med = quantile(&s, 0.5);
        let iqr = quantile(&s, quantiles.1) - quantile(&s, quantiles.0);
        let div = if iqr > 0.0 { iqr } else { 1.0 };
        out.extend(row.iter().map(|&v| ((v as f64 - med) / div) as f32));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Population std of each row.
pub fn channel_std(x: &Tensor<f32>) -> Vec<f64> {
    rows(x)
        .map(|row| {
            let n = row.len() as f64;
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            (row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Clamp row `c` to `±limits[c]`.
pub fn clamp_rows(x: &Tensor<f32>, limits: &[f64]) -> Result<Tensor<f32>> {
    check_matrix(x)?;
    if limits.len() != x.dim(0) {
        return Err(Error::Data(format!("{} clamp limits for {} channels", limits.len(), x.dim(0))));
    }
    let mut out = Vec::with_capacity(x.len());
    for (row, &lim) in rows(x).zip(limits) {
        out.extend(row.iter().map(|&v| (v as f64).clamp(-lim, lim) as f32));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Step 4: clamp each channel to ±m times its own std.
pub fn std_clamp(x: &Tensor<f32>, multiple: f64) -> Result<Tensor<f32>> {
    let limits: Vec<f64> = channel_std(x).into_iter().map(|s| multiple * s).collect();
    clamp_rows(x, &limits)
}

/// Steps 3 and 4 on one chunk.
pub fn scale_and_clamp(x: &Tensor<f32>, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    std_clamp(&robust_scale(x, cfg.quantiles)?, cfg.clamp_std)
}

/// All four steps on one recording, statistics over its full length.
pub fn preprocess(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    let centered = exclude_and_center(rec, cfg)?;
    scale_and_clamp(&centered.signal, cfg)
}

fn check_matrix(x: &Tensor<f32>) -> Result<()> {
    if x.rank() != 2 || x.is_empty() {
        return Err(Error::Data(format!("expected [channels, steps], got {:?}", x.shape())));
    }
    Ok(())
}

/// One aligned pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    /// `[F_y, S_y]`
    pub y: Tensor<f32>,
    /// `[F_x, S_x]`
    pub x: Tensor<f32>,
    pub subject: usize,
    pub track: usize,
    pub chunk: usize,
}

/// Chunk lengths `(S_y, S_x)` for the given rates.
pub fn chunk_lengths(chunk_seconds: f64, eeg_rate: f64, frames_per_second: f64) -> Result<(usize, usize)> {
    if !(chunk_seconds > 0.0 && eeg_rate > 0.0 && frames_per_second > 0.0) {
        return Err(Error::Config("chunk length and rates must be positive".into()));
    }
    let ly = (chunk_seconds * eeg_rate).round() as usize;
    let lx = (chunk_seconds * frames_per_second).round() as usize;
    if ly == 0 || lx == 0 {
        return Err(Error::Config(format!("{chunk_seconds} s chunks round to zero length")));
    }
    if ((ly as f64 / eeg_rate) - (lx as f64 / frames_per_second)).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{ly} EEG steps at {eeg_rate} Hz and {lx} frames at {frames_per_second} fps cover different durations"
        )));
    }
    Ok((ly, lx))
}

/// Non-overlapping consecutive chunks of both streams; the remainder is
/// dropped. `spectrogram` is `[F_x, frames]`.
pub fn chunk_align(
    rec: &RawRecording,
    spectrogram: &Tensor<f32>,
    chunk_seconds: f64,
    frames_per_second: f64,
) -> Result<Vec<PairedExample>> {
    check_matrix(spectrogram)?;
    let (ly, lx) = chunk_lengths(chunk_seconds, rec.rate, frames_per_second)?;
    let dy = rec.duration();
    let dx = spectrogram.dim(1) as f64 / frames_per_second;
    if (dy - dx).abs() > chunk_seconds {
        return Err(Error::Data(format!("EEG covers {dy:.3} s, spectrogram {dx:.3} s")));
    }
    let n = (rec.steps() / ly).min(spectrogram.dim(1) / lx);
    let cut = |t: &Tensor<f32>, len: usize, k: usize| {
        let data = rows(t).flat_map(|r| r[k * len..(k + 1) * len].iter().copied()).collect();
        Tensor::new(vec![t.dim(0), len], data)
    };
    (0..n)
        .map(|k| {
            Ok(PairedExample {
                y: cut(&rec.signal, ly, k)?,
                x: cut(spectrogram, lx, k)?,
                subject: rec.subject,
                track: rec.track,
                chunk: k,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Ood,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairedExample>,
    pub validation: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
    pub ood: Vec<PairedExample>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[PairedExample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Ood => &self.ood,
        }
    }

    /// Restrict every part to one subject.
    pub fn for_subject(&self, subject: usize) -> Self {
        let f = |v: &[PairedExample]| v.iter().filter(|e| e.subject == subject).cloned().collect();
        Self { train: f(&self.train), validation: f(&self.validation), test: f(&self.test), ood: f(&self.ood) }
    }
}

pub const MIN_CHUNKS_PER_RECORDING: usize = 10;

/// Split boundaries per (track, subject) recording at `floor(r·n)` on the
/// chunk index; OOD tracks go to `ood` whole.
pub fn split_dataset(examples: &[PairedExample], ratios: [f64; 3], ood_tracks: &[usize]) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<&PairedExample>> = BTreeMap::new();
    for e in examples {
        groups.entry((e.track, e.subject)).or_default().push(e);
    }
    let mut out = DatasetSplit::default();
    for ((track, subject), mut g) in groups {
        g.sort_by_key(|e| e.chunk);
        if ood_tracks.contains(&track) {
            out.ood.extend(g.into_iter().cloned());
            continue;
        }
        let n = g.len();
        if n < MIN_CHUNKS_PER_RECORDING {
            return Err(Error::Data(format!(
                "track {track} subject {subject} has {n} chunks; at least {MIN_CHUNKS_PER_RECORDING} are needed for three splits"
            )));
        }
        let b1 = (ratios[0] * n as f64 + 1e-9).floor() as usize;
        let b2 = ((ratios[0] + ratios[1]) * n as f64 + 1e-9).floor() as usize;
        if b1 == 0 || b2 == b1 || b2 >= n {
            return Err(Error::Data(format!("ratios {ratios:?} leave an empty split for {n} chunks")));
        }
        out.train.extend(g[..b1].iter().map(|e| (*e).clone()));
        out.validation.extend(g[b1..b2].iter().map(|e| (*e).clone()));
        out.test.extend(g[b2..].iter().map(|e| (*e).clone()));
    }
    Ok(out)
}

/// Batched tensors: y `[n, F_y, S_y]`, x `[n, 1, F_x, S_x]`, subject ids.
pub fn stack(examples: &[&PairedExample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
    let first = examples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (ys, xs) = (first.y.shape().to_vec(), first.x.shape().to_vec());
    let mut y = Vec::with_capacity(examples.len() * first.y.len());
    let mut x = Vec::with_capacity(examples.len() * first.x.len());
    for e in examples {
        if e.y.shape() != ys || e.x.shape() != xs {
            return Err(Error::Data("examples in a batch differ in shape".into()));
        }
        y.extend_from_slice(e.y.data());
        x.extend_from_slice(e.x.data());
    }
    let n = examples.len();
    Ok((
        Tensor::new(vec![n, ys[0], ys[1]], y)?,
        Tensor::new(vec![n, 1, xs[0], xs[1]], x)?,
        examples.iter().map(|e| e.subject).collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiftKind {
    Random,
    /// Band b drives channel b; needs `eeg_channels ≥ bands`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tracks: usize,
    pub subjects: usize,
    pub duration_seconds: f64,
    pub eeg_channels: usize,
    /// Noise-only channels appended after the signal channels (the analog
    /// of face electrodes), meant for exclusion.
    pub extra_channels: usize,
    pub eeg_rate: f64,
    pub freq_bins: usize,
    pub frames_per_second: f64,
    pub bands: usize,
    pub section_seconds: f64,
    /// Log-normal spread of section band levels around the track profile.
    pub section_spread: f64,
    pub modulation_depth: f64,
    /// Per-band modulation frequencies are spread evenly over this range.
    pub modulation_hz: (f64, f64),
    /// Log-normal per-band per-frame texture in the spectrogram only.
    pub texture: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub dc_offset_std: f64,
    pub extra_channel_std: f64,
    pub lift: LiftKind,
    pub subject_mixing: bool,
    pub mixing_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tracks: 8,
            subjects: 3,
            duration_seconds: 120.0,
            eeg_channels: 16,
            extra_channels: 4,
            eeg_rate: 160.0,
            freq_bins: 64,
            frames_per_second: 16.0,
            bands: 8,
            section_seconds: 7.0,
            section_spread: 0.25,
            modulation_depth: 0.5,
            modulation_hz: (0.5, 3.0),
            texture: 0.35,
            gain: 4.0,
            noise_std: 0.3,
            dc_offset_std: 5.0,
            extra_channel_std: 20.0,
            lift: LiftKind::Random,
            subject_mixing: true,
            mixing_strength: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.tracks == 0 || self.subjects == 0 || self.eeg_channels == 0 || self.bands == 0 {
            return bad("track, subject, channel and band counts must be positive");
        }
        if !(self.duration_seconds > 0.0 && self.eeg_rate > 0.0 && self.frames_per_second > 0.0 && self.section_seconds > 0.0) {
            return bad("durations and rates must be positive");
        }
        if self.freq_bins == 0 || self.freq_bins % self.bands != 0 {
            return bad("frequency bins must split evenly into bands");
        }
        if self.lift == LiftKind::Identity && self.eeg_channels < self.bands {
            return bad("identity lift needs at least one channel per band");
        }
        if !(0.0..1.0).contains(&self.modulation_depth) {
            return bad("modulation depth must lie in [0, 1)");
        }
        let neg = [self.section_spread, self.texture, self.noise_std, self.dc_offset_std, self.extra_channel_std, self.mixing_strength];
        if neg.iter().any(|v| !(*v >= 0.0)) || !(self.gain > 0.0) {
            return bad("spreads and noise levels must be non-negative, gain positive");
        }
        if self.frames() == 0 || self.eeg_steps() == 0 {
            return bad("duration too short for one frame");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_seconds * self.frames_per_second).round() as usize
    }

    pub fn eeg_steps(&self) -> usize {
        (self.duration_seconds * self.eeg_rate).round() as usize
    }

    pub fn raw_channels(&self) -> usize {
        self.eeg_channels + self.extra_channels
    }

    /// Preprocessing that drops the extra channels.
    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            channels: self.raw_channels(),
            excluded: (self.eeg_channels..self.raw_channels()).collect(),
            ..PreprocessConfig::default()
        }
    }
}

/// Generated corpus: one spectrogram and band-envelope set per track, one
/// recording per (track, subject).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub seed: u64,
    /// `[F_x, frames]` per track.
    pub spectrograms: Vec<Tensor<f32>>,
    /// `[bands, frames]` per track.
    pub envelopes: Vec<Tensor<f32>>,
    /// Track-major: index `track · subjects + subject`.
    pub recordings: Vec<RawRecording>,
    /// `[F_y, bands]`
    pub lift: Tensor<f32>,
    /// `[F_y, F_y]` per subject.
    pub mixing: Vec<Tensor<f32>>,
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Track t, frame k: `env[b] = level_{section(k)}[b] · (1 + d·sin(2π f_b k/fps + φ_{t,b}))`.
fn track_envelopes(cfg: &SynthConfig, master: u64, track: usize) -> Tensor<f32> {
    let mut rng = seed::rng(master, &[seed::label("track"), track as u64]);
    let b = cfg.bands;
    let profile: Vec<f64> = (0..b).map(|_| (0.8 * gauss(&mut rng)).exp()).collect();
    let phases: Vec<f64> = (0..b).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    let frames = cfg.frames();
    let per_section = ((cfg.section_seconds * cfg.frames_per_second).round() as usize).max(1);
    let sections = frames.div_ceil(per_section);
    let levels: Vec<Vec<f64>> = (0..sections)
        .map(|_| {
            let l: Vec<f64> = profile.iter().map(|p| p * (cfg.section_spread * gauss(&mut rng)).exp()).collect();
            // levels are defined up to scale after per-chunk scaling, so fix the mean
            let m = l.iter().sum::<f64>() / b as f64;
            l.into_iter().map(|v| v / m).collect()
        })
        .collect();
    let (f_lo, f_hi) = cfg.modulation_hz;
    let freq = |band: usize| if b == 1 { f_lo } else { f_lo + (f_hi - f_lo) * band as f64 / (b - 1) as f64 };
    Tensor::from_fn(&[b, frames], |i| {
        let (band, k) = (i / frames, i % frames);
        let t = k as f64 / cfg.frames_per_second;
        let m = 1.0 + cfg.modulation_depth * (std::f64::consts::TAU * freq(band) * t + phases[band]).sin();
        (levels[k / per_section][band] * m) as f32
    })
}

/// `x[f, k] = ln(1 + gain · env[band(f), k] · exp(texture · n[band(f), k]))`.
fn render_spectrogram(cfg: &SynthConfig, master: u64, track: usize, env: &Tensor<f32>) -> Tensor<f32> {
    let mut rng = seed::rng(master, &[seed::label("texture"), track as u64]);
    let frames = cfg.frames();
    let tex: Vec<f64> = (0..cfg.bands * frames).map(|_| (cfg.texture * gauss(&mut rng)).exp()).collect();
    let width = cfg.freq_bins / cfg.bands;
    Tensor::from_fn(&[cfg.freq_bins, frames], |i| {
        let (f, k) = (i / frames, i % frames);
        let j = (f / width) * frames + k;
        (cfg.gain * env.data()[j] as f64 * tex[j]).ln_1p() as f32
    })
}

fn lift_matrix(cfg: &SynthConfig, master: u64) -> Tensor<f32> {
    let (c, b) = (cfg.eeg_channels, cfg.bands);
    match cfg.lift {
        LiftKind::Identity => Tensor::from_fn(&[c, b], |i| if i / b == i % b { 1.0 } else { 0.0 }),
        LiftKind::Random => {
            let mut rng = seed::rng(master, &[seed::label("lift")]);
            let s = 1.0 / (b as f64).sqrt();
            Tensor::from_fn(&[c, b], |_| (s * gauss(&mut rng)) as f32)
        }
    }
}

/// Near-identity `I + s·G/√C`, redrawn until clearly invertible.
fn mixing_matrix(cfg: &SynthConfig, master: u64, subject: usize) -> Tensor<f32> {
    let c = cfg.eeg_channels;
    if !cfg.subject_mixing {
        return Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    }
    let mut rng = seed::rng(master, &[seed::label("mixing"), subject as u64]);
    let s = cfg.mixing_strength / (c as f64).sqrt();
    loop {
        let m = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { 0.0 } + s * gauss(&mut rng));
        let sv = m.singular_values();
        if sv.min() > 0.1 * sv.max() {
            return Tensor::from_fn(&[c, c], |i| m[(i / c, i % c)] as f32);
        }
    }
}

/// `y = W_s · U · env(frame(i)) + σ·noise + dc`, then the extra channels.
fn render_recording(
    cfg: &SynthConfig,
    master: u64,
    track: usize,
    subject: usize,
    env: &Tensor<f32>,
    lift: &Tensor<f32>,
    mix: &Tensor<f32>,
) -> Result<RawRecording> {
    let (c, b, frames) = (cfg.eeg_channels, cfg.bands, cfg.frames());
    let steps = cfg.eeg_steps();
    // combined map A = W·U, [c, b]
    let (w, u) = (mix.data(), lift.data());
    let a: Vec<f64> = (0..c * b)
        .map(|i| {
            let (r, k) = (i / b, i % b);
            (0..c).map(|j| w[r * c + j] as f64 * u[j * b + k] as f64).sum()
        })
        .collect();
    let mut rng = seed::rng(master, &[seed::label("eeg"), track as u64, subject as u64]);
    let dc: Vec<f64> = (0..cfg.raw_channels()).map(|_| cfg.dc_offset_std * gauss(&mut rng)).collect();
    let mut data = vec![0f32; cfg.raw_channels() * steps];
    for i in 0..steps {
        let k = ((i as f64 * cfg.frames_per_second / cfg.eeg_rate).floor() as usize).min(frames - 1);
        for r in 0..c {
            let mut v = dc[r];
            for band in 0..b {
                v += a[r * b + band] * env.data()[band * frames + k] as f64;
            }
            if cfg.noise_std > 0.0 {
                v += cfg.noise_std * gauss(&mut rng);
            }
            data[r * steps + i] = v as f32;
        }
        for r in c..cfg.raw_channels() {
            data[r * steps + i] = (dc[r] + cfg.extra_channel_std * gauss(&mut rng)) as f32;
        }
    }
    RawRecording::new(Tensor::new(vec![cfg.raw_channels(), steps], data)?, cfg.eeg_rate, subject, track)
}

/// Deterministic given `(cfg, seed)`. Every random component draws from its
/// own stream derived from the master seed and the track/subject ids.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let lift = lift_matrix(cfg, seed);
    let mixing: Vec<Tensor<f32>> = (0..cfg.subjects).map(|s| mixing_matrix(cfg, seed, s)).collect();
    let mut envelopes = Vec::with_capacity(cfg.tracks);
    let mut spectrograms = Vec::with_capacity(cfg.tracks);
    let mut recordings = Vec::with_capacity(cfg.tracks * cfg.subjects);
    for t in 0..cfg.tracks {
        let env = track_envelopes(cfg, seed, t);
        spectrograms.push(render_spectrogram(cfg, seed, t, &env));
        for (s, mix) in mixing.iter().enumerate() {
            recordings.push(render_recording(cfg, seed, t, s, &env, &lift, mix)?);
        }
        envelopes.push(env);
    }
    Ok(SynthCorpus { config: cfg.clone(), seed, spectrograms, envelopes, recordings, lift, mixing })
}

impl SynthCorpus {
    /// Exclusion and centering per recording, chunking, then per-chunk
    /// scaling and clamping.
    pub fn examples(&self, pre: &PreprocessConfig, chunk_seconds: f64) -> Result<Vec<PairedExample>> {
        let mut out = Vec::new();
        for rec in &self.recordings {
            let centered = exclude_and_center(rec, pre)?;
            for mut ex in chunk_align(&centered, &self.spectrograms[rec.track], chunk_seconds, self.config.frames_per_second)? {
                ex.y = scale_and_clamp(&ex.y, pre)?;
                out.push(ex);
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({ "kind": "synthetic-corpus", "seed": self.seed, "config": self.config });
        let mut c = Container::new(meta);
        c.push("lift", self.lift.clone());
        for (s, m) in self.mixing.iter().enumerate() {
            c.push(format!("mixing/s{s}"), m.clone());
        }
        for t in 0..self.config.tracks {
            c.push(format!("spectrogram/t{t}"), self.spectrograms[t].clone());
            c.push(format!("envelope/t{t}"), self.envelopes[t].clone());
        }
        for r in &self.recordings {
            c.push(format!("eeg/t{}/s{}", r.track, r.subject), r.signal.clone());
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("corpus file: {m}"));
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("synthetic-corpus") {
            return Err(bad("not a synthetic corpus".into()));
        }
        let config: SynthConfig = serde_json::from_value(c.meta["config"].clone())?;
        let seed = c.meta["seed"].as_u64().ok_or_else(|| bad("missing seed".into()))?;
        config.validate()?;
        let lift = c.take("lift")?;
        let mixing = (0..config.subjects).map(|s| c.take(&format!("mixing/s{s}"))).collect::<ndcore::Result<Vec<_>>>()?;
        let mut spectrograms = Vec::new();
        let mut envelopes = Vec::new();
        let mut recordings = Vec::new();
        for t in 0..config.tracks {
            spectrograms.push(c.take(&format!("spectrogram/t{t}"))?);
            envelopes.push(c.take(&format!("envelope/t{t}"))?);
            for s in 0..config.subjects {
                let sig = c.take(&format!("eeg/t{t}/s{s}"))?;
                recordings.push(RawRecording::new(sig, config.eeg_rate, s, t)?);
            }
        }
        Ok(Self { config, seed, spectrograms, envelopes, recordings, lift, mixing })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.write(path)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// One line of the dataset inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub track: usize,
    pub subject: usize,
    pub chunk: usize,
    pub split: Split,
}

/// Human-readable dataset description written next to the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub chunk_seconds: f64,
    pub split_ratios: [f64; 3],
    pub ood_tracks: Vec<usize>,
    /// Where robust-scaling and clamping statistics are computed.
    pub scaling_statistics: String,
    pub counts: BTreeMap<Split, usize>,
    pub chunks: Vec<ChunkRecord>,
}

impl DatasetManifest {
    pub fn new(
        corpus: &SynthCorpus,
        pre: &PreprocessConfig,
        chunk_seconds: f64,
        ratios: [f64; 3],
        ood_tracks: &[usize],
        split: &DatasetSplit,
    ) -> Self {
        let mut chunks = Vec::new();
        let mut counts = BTreeMap::new();
        for s in [Split::Train, Split::Validation, Split::Test, Split::Ood] {
            counts.insert(s, split.get(s).len());
            chunks.extend(split.get(s).iter().map(|e| ChunkRecord { track: e.track, subject: e.subject, chunk: e.chunk, split: s }));
        }
        chunks.sort_by_key(|c| (c.track, c.subject, c.chunk));
        Self {
            seed: corpus.seed,
            synth: corpus.config.clone(),
            preprocess: pre.clone(),
            chunk_seconds,
            split_ratios: ratios,
            ood_tracks: ood_tracks.to_vec(),
            scaling_statistics: "per-chunk".into(),
            counts,
            chunks,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(channels: usize, steps: usize, f: impl FnMut(usize) -> f32) -> RawRecording {
        RawRecording::new(Tensor::from_fn(&[channels, steps], f), 1000.0, 0, 0).unwrap()
    }

    #[test]
    fn exclusion_keeps_124_of_128() {
        let cfg = PreprocessConfig { channels: 128, excluded: vec![3, 50, 126, 127], baseline_steps: 100, ..Default::default() };
        let r = rec(128, 400, |i| (i / 400) as f32);
        let out = exclude_and_center(&r, &cfg).unwrap();
        assert_eq!(out.signal.shape(), &[124, 400]);
        assert_eq!(preprocess(&r, &cfg).unwrap().shape(), &[124, 400]);
        // rows keep their order; constant rows become zero after centering
        assert!(out.signal.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_centering_uses_first_window() {
        let cfg = PreprocessConfig { channels: 1, excluded: vec![], baseline_steps: 1000, ..Default::default() };
        // 3.0 over the baseline, 7.0 afterwards
        let r = rec(1, 3000, |i| if i < 1000 { 3.0 } else { 7.0 });
        let out = exclude_and_center(&r, &cfg).unwrap();
        assert_eq!(out.signal.data()[0], 0.0);
        assert_eq!(out.signal.data()[2999], 4.0);
    }

    #[test]
    fn constant_channel_uses_unit_divisor() {
        let cfg = PreprocessConfig { channels: 2, excluded: vec![], baseline_steps: 10, ..Default::default() };
        let r = rec(2, 100, |i| if i < 100 { 5.0 } else { (i % 7) as f32 });
        let out = preprocess(&r, &cfg).unwrap();
        assert!(out.data()[..100].iter().all(|&v| v == 0.0));
        assert!(out.is_finite());
        let s = robust_scale(&Tensor::full(&[1, 9], 2.5f32), (0.25, 0.75)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn robust_scale_oracle() {
        // sorted 0..=8: median 4, q25 2, q75 6
        let x = Tensor::new(vec![1, 9], vec![8.0, 0.0, 4.0, 2.0, 6.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = robust_scale(&x, (0.25, 0.75)).unwrap();
        assert_eq!(s.data(), &[1.0, -1.0, 0.0, -0.5, 0.5, -0.75, -0.25, 0.25, 0.75]);
    }

    /// Values ±1 plus one outlier at v with v = 25·std of the whole row.
    fn outlier_row(n: usize) -> (Tensor<f32>, f64) {
        let mut v = 25.0;
        for _ in 0..200 {
            let mut row: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            row.push(v);
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let sd = (row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
            v = 25.0 * sd;
        }
        let mut row: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        row.push(v as f32);
        (Tensor::new(vec![1, n + 1], row).unwrap(), v)
    }

    #[test]
    fn sample_at_25_std_clips_to_20() {
        let (x, v) = outlier_row(20000);
        let sd = channel_std(&x)[0];
        assert!((v / sd - 25.0).abs() < 1e-3, "{}", v / sd);
        let out = std_clamp(&x, 20.0).unwrap();
        let last = *out.data().last().unwrap() as f64;
        assert!((last - 20.0 * sd).abs() < 1e-3 * sd, "{last} vs {}", 20.0 * sd);
        assert!(out.data()[..20000].iter().zip(x.data()).all(|(a, b)| a == b));
    }

    #[test]
    fn preprocess_errors() {
        let cfg = PreprocessConfig { channels: 2, excluded: vec![], baseline_steps: 100, ..Default::default() };
        assert!(preprocess(&rec(2, 100, |_| 0.0), &cfg).is_err());
        assert!(preprocess(&rec(3, 200, |_| 0.0), &cfg).is_err());
        let all = PreprocessConfig { excluded: vec![0, 1], ..cfg.clone() };
        assert!(preprocess(&rec(2, 200, |_| 0.0), &all).is_err());
        assert!(PreprocessConfig { clamp_std: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(PreprocessConfig { quantiles: (0.75, 0.25), ..cfg }.validate().is_err());
    }

    fn synth_rec(seconds: f64, rate: f64) -> RawRecording {
        let n = (seconds * rate).round() as usize;
        RawRecording::new(Tensor::from_fn(&[3, n], |i| i as f32), rate, 1, 2).unwrap()
    }

    fn spec(seconds: f64, fps: f64) -> Tensor<f32> {
        let n = (seconds * fps).round() as usize;
        Tensor::from_fn(&[4, n], |i| i as f32)
    }

    #[test]
    fn chunk_counts() {
        let c = chunk_align(&synth_rec(120.0, 160.0), &spec(120.0, 16.0), 3.5, 16.0).unwrap();
        assert_eq!(c.len(), 34);
        assert!(c.iter().all(|e| e.y.shape() == [3, 560] && e.x.shape() == [4, 56]));
        assert!(c.iter().enumerate().all(|(k, e)| e.chunk == k && e.track == 2 && e.subject == 1));
        // chunk k of y starts at step k·560
        assert_eq!(c[5].y.data()[0], (5 * 560) as f32);
        assert_eq!(c[5].x.data()[56], (1920 + 5 * 56) as f32);
        assert_eq!(chunk_align(&synth_rec(3.5, 160.0), &spec(3.5, 16.0), 3.5, 16.0).unwrap().len(), 1);
        assert!(chunk_align(&synth_rec(3.4, 160.0), &spec(3.4, 16.0), 3.5, 16.0).unwrap().is_empty());
    }

    #[test]
    fn chunk_duration_checks() {
        assert!(chunk_align(&synth_rec(120.0, 160.0), &spec(110.0, 16.0), 3.5, 16.0).is_err());
        // 3.5 s at 100 Hz and 15 fps: 350 steps vs 53 frames do not align
        assert!(chunk_lengths(3.5, 100.0, 15.0).is_err());
        let (ly, lx) = chunk_lengths(3.5, 100.0, 16.0).unwrap();
        assert_eq!((ly, lx), (350, 56));
        assert_eq!(ly as f64 / 100.0, lx as f64 / 16.0);
    }

    fn examples(track: usize, subject: usize, n: usize) -> Vec<PairedExample> {
        (0..n)
            .map(|chunk| PairedExample { y: Tensor::zeros(&[1, 2]), x: Tensor::zeros(&[1, 2]), subject, track, chunk })
            .collect()
    }

    #[test]
    fn split_sizes() {
        let r = [0.8, 0.1, 0.1];
        let s = split_dataset(&examples(0, 0, 100), r, &[]).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert!(s.train.iter().all(|e| e.chunk < 80) && s.test.iter().all(|e| e.chunk >= 90));
        let s = split_dataset(&examples(0, 0, 10), r, &[]).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert!(split_dataset(&examples(0, 0, 9), r, &[]).is_err());
        assert!(split_dataset(&examples(0, 0, 10), [0.8, 0.1, 0.2], &[]).is_err());
    }

    #[test]
    fn ood_isolation() {
        let mut all = examples(0, 0, 12);
        all.extend(examples(1, 0, 34));
        all.extend(examples(1, 1, 34));
        let s = split_dataset(&all, [0.8, 0.1, 0.1], &[0]).unwrap();
        assert_eq!(s.ood.len(), 12);
        for part in [&s.train, &s.validation, &s.test] {
            assert!(part.iter().all(|e| e.track == 1));
        }
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (54, 6, 8));
        assert_eq!(s.for_subject(1).train.len(), 27);
        // short OOD tracks are fine
        assert!(split_dataset(&examples(0, 0, 3), [0.8, 0.1, 0.1], &[0]).is_ok());
    }

    fn small() -> SynthConfig {
        SynthConfig { tracks: 3, subjects: 2, duration_seconds: 14.0, ..Default::default() }
    }

    #[test]
    fn identity_story_is_exact() {
        let cfg = SynthConfig {
            eeg_channels: 8,
            extra_channels: 0,
            noise_std: 0.0,
            dc_offset_std: 0.0,
            lift: LiftKind::Identity,
            subject_mixing: false,
            ..small()
        };
        let c = synth_generate(&cfg, 3).unwrap();
        let steps = cfg.eeg_steps();
        for r in &c.recordings {
            let env = &c.envelopes[r.track];
            for b in 0..8 {
                for i in (0..steps).step_by(7) {
                    let k = i * 16 / 160;
                    assert_eq!(r.signal.data()[b * steps + i], env.data()[b * cfg.frames() + k]);
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_tracks_differ() {
        let a = synth_generate(&small(), 9).unwrap();
        let b = synth_generate(&small(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.recordings.iter().zip(&b.recordings).all(|(x, y)| x
            .signal
            .data()
            .iter()
            .zip(y.signal.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())));
        assert_ne!(a, synth_generate(&small(), 10).unwrap());
        let mut min = f64::INFINITY;
        for i in 0..a.envelopes.len() {
            for j in i + 1..a.envelopes.len() {
                let d = a.envelopes[i].sub(&a.envelopes[j]).unwrap().sq_norm() as f64;
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
        // subjects of one track share the stimulus but not the recording
        assert_ne!(a.recordings[0].signal, a.recordings[1].signal);
        assert_eq!(a.recordings[0].channels(), 20);
    }

    #[test]
    fn synth_spectrogram_is_block_constant() {
        let c = synth_generate(&small(), 1).unwrap();
        let s = &c.spectrograms[0];
        let frames = small().frames();
        for f in 0..64 {
            let base = (f / 8) * 8;
            assert_eq!(&s.data()[f * frames..(f + 1) * frames], &s.data()[base * frames..(base + 1) * frames]);
        }
        assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn synth_examples_pipeline() {
        let cfg = small();
        let c = synth_generate(&cfg, 2).unwrap();
        let ex = c.examples(&cfg.preprocess_config(), 3.5).unwrap();
        assert_eq!(ex.len(), 3 * 2 * 4);
        assert!(ex.iter().all(|e| e.y.shape() == [16, 560] && e.x.shape() == [64, 56]));
        let (y, x, subj) = stack(&ex.iter().take(3).collect::<Vec<_>>()).unwrap();
        assert_eq!(y.shape(), &[3, 16, 560]);
        assert_eq!(x.shape(), &[3, 1, 64, 56]);
        assert_eq!(subj, vec![0, 0, 0]);
        // per-chunk scaling puts each channel's median at zero
        let mut row: Vec<f64> = ex[0].y.data()[..560].iter().map(|&v| v as f64).collect();
        row.sort_by(f64::total_cmp);
        assert!(quantile(&row, 0.5).abs() < 1e-6);
    }

    #[test]
    fn invalid_synth_configs() {
        assert!(synth_generate(&SynthConfig { freq_bins: 60, ..small() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { tracks: 0, ..small() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { lift: LiftKind::Identity, eeg_channels: 4, ..small() }, 0).is_err());
    }

    #[test]
    fn corpus_file_round_trip() {
        let c = synth_generate(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.ndtc");
        c.write(&p).unwrap();
        assert_eq!(SynthCorpus::read(&p).unwrap(), c);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(SynthCorpus::read(&p).is_err());
    }

    #[test]
    fn payload_size_matches_manifest() {
        let mut c = Container::new(serde_json::json!({}));
        c.push("eeg", Tensor::<f32>::zeros(&[124, 3500]));
        let bytes = c.to_bytes();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 16 - mlen, 124 * 3500 * 4);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn manifest_lists_every_chunk() {
        let cfg = SynthConfig { duration_seconds: 35.0, ..small() };
        let c = synth_generate(&cfg, 0).unwrap();
        let pre = cfg.preprocess_config();
        let ex = c.examples(&pre, 3.5).unwrap();
        let split = split_dataset(&ex, [0.8, 0.1, 0.1], &[0]).unwrap();
        let m = DatasetManifest::new(&c, &pre, 3.5, [0.8, 0.1, 0.1], &[0], &split);
        assert_eq!(m.chunks.len(), ex.len());
        assert_eq!(m.counts[&Split::Ood], 20);
        let text = m.to_text().unwrap();
        assert!(text.contains("per-chunk"));
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn clamp_idempotent_for_fixed_limits(seed in 0u64..1000, m in 0.5f64..5.0) {
            let x = Tensor::<f32>::randn(&[3, 50], &mut ChaCha8Rng::seed_from_u64(seed));
            let limits: Vec<f64> = channel_std(&x).into_iter().map(|s| m * s).collect();
            let once = clamp_rows(&x, &limits).unwrap();
            prop_assert_eq!(clamp_rows(&once, &limits).unwrap(), once);
        }

        #[test]
        fn second_std_clamp_is_identity_when_nothing_clipped(seed in 0u64..1000) {
            let x = Tensor::<f32>::randn(&[4, 200], &mut ChaCha8Rng::seed_from_u64(seed));
            // 200 samples cannot reach 20 std (bounded by sqrt(n))
            let once = std_clamp(&x, 20.0).unwrap();
            prop_assert_eq!(&once, &x);
            prop_assert_eq!(std_clamp(&once, 20.0).unwrap(), once);
        }

        #[test]
        fn preprocess_ignores_channel_identity(seed in 0u64..500) {
            // permuting kept channels permutes the output rows
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::randn(&[3, 300], &mut rng);
            let cfg = PreprocessConfig { channels: 3, excluded: vec![], baseline_steps: 50, ..Default::default() };
            let perm = [2usize, 0, 1];
            let xp = Tensor::from_fn(&[3, 300], |i| x.data()[perm[i / 300] * 300 + i % 300]);
            let a = preprocess(&RawRecording::new(x, 100.0, 0, 0).unwrap(), &cfg).unwrap();
            let b = preprocess(&RawRecording::new(xp, 100.0, 0, 0).unwrap(), &cfg).unwrap();
            for (r, &p) in perm.iter().enumerate() {
                prop_assert_eq!(&b.data()[r * 300..(r + 1) * 300], &a.data()[p * 300..(p + 1) * 300]);
            }
        }

        #[test]
        fn splits_are_disjoint(n in 10usize..200) {
            let s = split_dataset(&examples(0, 0, n), [0.8, 0.1, 0.1], &[]).unwrap();
            prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
            let last_train = s.train.last().unwrap().chunk;
            prop_assert!(s.validation.iter().all(|e| e.chunk > last_train));
            let last_val = s.validation.last().unwrap().chunk;
            prop_assert!(s.test.iter().all(|e| e.chunk > last_val));
        }
    }
}
