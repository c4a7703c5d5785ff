//! Embedding metrics between decoded and ground-truth spectrograms.
//!
//! Two analytic embedders stand in for pretrained audio encoders:
//! [`GlobalEmbedder`] pools band statistics over the whole chunk into one
//! unit vector, [`FrameEmbedder`] keeps a sequence of window embeddings.
//! Both read spectrograms `[F_x, S_x]` (any leading unit dims) of
//! log-magnitudes, so band means are log band energies.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const NORM_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_RESAMPLES: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub freq_bins: usize,
    pub global_bands: usize,
    pub global_dim: usize,
    pub frame_bands: usize,
    pub frame_dim: usize,
    /// Frames pooled into one frame embedding.
    pub frame_width: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { freq_bins: 64, global_bands: 16, global_dim: 64, frame_bands: 16, frame_dim: 32, frame_width: 4, seed: 0x5eed }
    }
}

fn check_bands(freq_bins: usize, bands: usize, dim: usize) -> Result<()> {
    if bands == 0 || dim == 0 || freq_bins == 0 || freq_bins % bands != 0 {
        return Err(Error::Config(format!("{freq_bins} bins cannot be pooled into {bands} bands of {dim} dims")));
    }
    Ok(())
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_projection(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| s * normal(rng))
}

/// `[F, S]` view of a spectrogram with unit leading dims.
fn grid(x: &Tensor<f32>, freq_bins: usize) -> Result<(usize, &[f32])> {
    let s = x.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) || s[s.len() - 2] != freq_bins || s[s.len() - 1] == 0 {
        return Err(Error::Eval(format!("expected a [{freq_bins}, S] spectrogram, got {s:?}")));
    }
    Ok((s[s.len() - 1], x.data()))
}

/// Band means per frame, `[bands][frames]`.
fn band_means(data: &[f32], freq_bins: usize, frames: usize, bands: usize) -> Vec<Vec<f64>> {
    let width = freq_bins / bands;
    (0..bands)
        .map(|b| {
            (0..frames)
                .map(|k| (0..width).map(|f| data[(b * width + f) * frames + k] as f64).sum::<f64>() / width as f64)
                .collect()
        })
        .collect()
}

/// Unit-norm chunk embedding: per-band mean and std over time, standardized
/// with a fitted center and scale, through a seeded Gaussian projection.
#[derive(Clone, Debug)]
pub struct GlobalEmbedder {
    cfg: EmbedderConfig,
    center: Vec<f64>,
    scale: Vec<f64>,
    proj: DMatrix<f64>,
}

impl GlobalEmbedder {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self> {
        Self::with_center(cfg, vec![0.0; 2 * cfg.global_bands])
    }

    pub fn with_center(cfg: &EmbedderConfig, center: Vec<f64>) -> Result<Self> {
        Self::with_stats(cfg, center, vec![1.0; 2 * cfg.global_bands])
    }

    /// Features map to `(f - center) / scale` before projection.
    pub fn with_stats(cfg: &EmbedderConfig, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_bands(cfg.freq_bins, cfg.global_bands, cfg.global_dim)?;
        let n = 2 * cfg.global_bands;
        if center.len() != n || scale.len() != n {
            return Err(Error::Config(format!(
                "center/scale have {}/{} entries, need {n}",
                center.len(),
                scale.len()
            )));
        }
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config("embedder scale must be positive".into()));
        }
        let mut rng = seed::rng(cfg.seed, &[seed::label("global-embedder")]);
        let proj = gaussian_projection(cfg.global_dim, n, &mut rng);
        Ok(Self { cfg: cfg.clone(), center, scale, proj })
    }

    /// Center on the mean feature vector of `corpus` and scale by the
    /// per-feature std. Features that do not vary keep scale 1.
    pub fn fit(cfg: &EmbedderConfig, corpus: &[Tensor<f32>]) -> Result<Self> {
        let mut e = Self::new(cfg)?;
        if corpus.is_empty() {
            return Err(Error::Eval("cannot fit an embedder center on no data".into()));
        }
        let feats = corpus.iter().map(|x| e.features(x)).collect::<Result<Vec<_>>>()?;
        let n = feats.len() as f64;
        let c: Vec<f64> = (0..e.center.len()).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let s = (0..c.len())
            .map(|k| {
                let sd = (feats.iter().map(|f| (f[k] - c[k]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-9 { sd } else { 1.0 }
            })
            .collect();
        e.center = c;
        e.scale = s;
        Ok(e)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.cfg.global_dim
    }

    /// Uncentered pooled features `[means..., stds...]`.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let (frames, data) = grid(x, self.cfg.freq_bins)?;
        let bm = band_means(data, self.cfg.freq_bins, frames, self.cfg.global_bands);
        let means: Vec<f64> = bm.iter().map(|b| b.iter().sum::<f64>() / frames as f64).collect();
        let stds = bm.iter().zip(&means).map(|(b, m)| (b.iter().map(|v| (v - m).powi(2)).sum::<f64>() / frames as f64).sqrt());
        Ok(means.iter().copied().chain(stds).collect())
    }

    /// An all-zero input, or one whose centered projection vanishes, maps to
    /// the first basis vector.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let f = self.features(x)?;
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::Eval("non-finite spectrogram".into()));
        }
        let mut e0 = vec![0.0; self.dim()];
        e0[0] = 1.0;
        if x.data().iter().all(|&v| v == 0.0) {
            return Ok(e0);
        }
        let v = DVector::from_iterator(f.len(), f.iter().zip(&self.center).zip(&self.scale).map(|((a, c), s)| (a - c) / s));
        let p = &self.proj * v;
        let n = p.norm();
        if n < 1e-12 {
            return Ok(e0);
        }
        Ok(p.iter().map(|v| v / n).collect())
    }
}

/// Frame embeddings: `frames × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSeq {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub frame_rate: f64,
}

impl FrameEmbeddingSeq {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim || !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Eval(format!("invalid frame sequence ({frames} × {dim}, {} values)", data.len())));
        }
        Ok(Self { frames, dim, data, frame_rate })
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        (0..self.dim).map(|d| (0..self.frames).map(|k| self.data[k * self.dim + d]).sum::<f64>() / self.frames as f64).collect()
    }
}

/// Per window of `frame_width` frames: band means, fixed projection.
#[derive(Clone, Debug)]
pub struct FrameEmbedder {
    cfg: EmbedderConfig,
    proj: DMatrix<f64>,
}

impl FrameEmbedder {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self> {
        check_bands(cfg.freq_bins, cfg.frame_bands, cfg.frame_dim)?;
        if cfg.frame_width == 0 {
            return Err(Error::Config("frame pooling width must be positive".into()));
        }
        let mut rng = seed::rng(cfg.seed, &[seed::label("frame-embedder")]);
        Ok(Self { cfg: cfg.clone(), proj: gaussian_projection(cfg.frame_dim, cfg.frame_bands, &mut rng) })
    }

    pub fn frame_count(&self, frames: usize) -> usize {
        frames / self.cfg.frame_width
    }

    /// `frames_per_second` is the spectrogram frame rate.
    pub fn embed(&self, x: &Tensor<f32>, frames_per_second: f64) -> Result<FrameEmbeddingSeq> {
        let (frames, data) = grid(x, self.cfg.freq_bins)?;
        let w = self.cfg.frame_width;
        let count = self.frame_count(frames);
        if count == 0 {
            return Err(Error::Eval(format!("{frames} frames are fewer than the pooling width {w}")));
        }
        let bm = band_means(data, self.cfg.freq_bins, frames, self.cfg.frame_bands);
        let mut out = Vec::with_capacity(count * self.cfg.frame_dim);
        for k in 0..count {
            let v = DVector::from_iterator(bm.len(), bm.iter().map(|b| b[k * w..(k + 1) * w].iter().sum::<f64>() / w as f64));
            out.extend((&self.proj * v).iter());
        }
        FrameEmbeddingSeq::new(count, self.cfg.frame_dim, out, frames_per_second / w as f64)
    }
}

/// Sample mean and covariance of an embedding set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
    /// Off-diagonal terms were dropped because `count < dim`.
    pub shrunk: bool,
}

/// Unbiased covariance plus `ridge·I`; diagonal only when there are fewer
/// samples than dimensions.
pub fn fit_gaussian(samples: &[Vec<f64>], ridge: f64) -> Result<GaussianStats> {
    if samples.len() < 2 {
        return Err(Error::Eval(format!("need at least 2 samples to fit a Gaussian, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Eval("embedding set has inconsistent dimensions".into()));
    }
    let n = samples.len();
    let mean = DVector::from_fn(d, |i, _| samples.iter().map(|s| s[i]).sum::<f64>() / n as f64);
    let x = DMatrix::from_fn(n, d, |r, c| samples[r][c] - mean[c]);
    let mut cov = x.transpose() * &x / (n - 1) as f64;
    let shrunk = n < d;
    if shrunk {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    Ok(GaussianStats { mean, cov, count: n, shrunk })
}

/// Symmetric PSD square root through the eigendecomposition, negative
/// eigenvalues clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Eval(format!("sqrtm of a {}×{} matrix", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(Error::Eval(format!("matrix is not symmetric (max deviation {asym:e})")));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -1e-8 * scale) {
        return Err(Error::Eval(format!("matrix is not positive semidefinite (eigenvalue {l:e})")));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2·(Σ₁^½ Σ₂ Σ₁^½)^½)`, clipped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Eval(format!("FAD between {}- and {}-dim sets", a.mean.len(), b.mean.len())));
    }
    let r1 = sqrtm_psd(&a.cov)?;
    let inner = &r1 * &b.cov * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner)?;
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

pub fn fad(set_gt: &[Vec<f64>], set_gen: &[Vec<f64>], ridge: f64) -> Result<f64> {
    frechet_distance(&fit_gaussian(set_gt, ridge)?, &fit_gaussian(set_gen, ridge)?)
}

/// Pearson correlation. One constant argument gives 0; both constant is
/// undefined.
pub fn pearson(e: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e.len() != e_hat.len() || e.len() < 2 {
        return Err(Error::Eval(format!("pearson needs equal lengths ≥ 2, got {} and {}", e.len(), e_hat.len())));
    }
    let n = e.len() as f64;
    let (ma, mb) = (e.iter().sum::<f64>() / n, e_hat.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in e.iter().zip(e_hat) {
        let (da, db) = (a - ma, b - mb);
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    match (va > 0.0, vb > 0.0) {
        (false, false) => Err(Error::Eval("pearson of two constant vectors is undefined".into())),
        (true, true) => Ok((num / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

/// Inner product of two unit-norm embeddings.
pub fn clap_score(e: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e.len() != e_hat.len() {
        return Err(Error::Eval(format!("score between {}- and {}-dim embeddings", e.len(), e_hat.len())));
    }
    for v in [e, e_hat] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Eval(format!("embedding norm {n} is not 1")));
        }
    }
    Ok(e.iter().zip(e_hat).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

/// `(1/I)·‖e − ê‖²` over all frame entries.
pub fn mse_frames(e: &FrameEmbeddingSeq, e_hat: &FrameEmbeddingSeq) -> Result<f64> {
    if (e.frames, e.dim) != (e_hat.frames, e_hat.dim) {
        return Err(Error::Eval(format!("frame sequences {}×{} and {}×{}", e.frames, e.dim, e_hat.frames, e_hat.dim)));
    }
    Ok(e.data.iter().zip(&e_hat.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / e.frames as f64)
}

/// Pearson over the flattened frame sequences.
pub fn pearson_frames(e: &FrameEmbeddingSeq, e_hat: &FrameEmbeddingSeq) -> Result<f64> {
    if (e.frames, e.dim) != (e_hat.frames, e_hat.dim) {
        return Err(Error::Eval("frame sequences differ in shape".into()));
    }
    pearson(&e.data, &e_hat.data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub observed: f64,
    pub resamples: usize,
    pub p_value: f64,
    pub direction: Direction,
    pub seed: u64,
}

/// Paired-metric bootstrap. `metric(i, j)` scores decoded item `j` against
/// ground truth `i`. Each null draw re-pairs ground truth `i` with a decoded
/// index drawn uniformly with replacement; p = (1 + k)/(R + 1) where k counts
/// null means at least as extreme as the observed one.
pub fn bootstrap_p(
    n: usize,
    mut metric: impl FnMut(usize, usize) -> Result<f64>,
    resamples: usize,
    seed: u64,
    direction: Direction,
) -> Result<SignificanceResult> {
    if n < 2 {
        return Err(Error::Eval(format!("bootstrap needs at least 2 pairs, got {n}")));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = metric(i, j)?;
            if !v.is_finite() {
                return Err(Error::Eval(format!("metric is not finite for pair ({i}, {j})")));
            }
            table[i * n + j] = v;
        }
    }
    bootstrap_table(&table, n, resamples, seed, direction)
}

/// [`bootstrap_p`] on a precomputed `n×n` table (row = ground truth).
pub fn bootstrap_table(table: &[f64], n: usize, resamples: usize, seed: u64, direction: Direction) -> Result<SignificanceResult> {
    if table.len() != n * n || n < 2 || resamples == 0 {
        return Err(Error::Eval("bootstrap table must be n×n with n ≥ 2".into()));
    }
    let observed = (0..n).map(|i| table[i * n + i]).sum::<f64>() / n as f64;
    // ties must count as extreme, so compare with a relative slack
    let slack = 1e-12 * observed.abs().max(1.0);
    let mut k = 0usize;
    for r in 0..resamples {
        let mut rng = seed::rng(seed, &[r as u64]);
        let mean = (0..n).map(|i| table[i * n + rng.random_range(0..n)]).sum::<f64>() / n as f64;
        let extreme = match direction {
            Direction::HigherBetter => mean >= observed - slack,
            Direction::LowerBetter => mean <= observed + slack,
        };
        k += extreme as usize;
    }
    Ok(SignificanceResult { observed, resamples, p_value: (1 + k) as f64 / (resamples + 1) as f64, direction, seed })
}

/// `M[i][j]` = mean score between decoded chunks of track `i` and
/// ground-truth chunks of track `j`.
pub fn cross_score_matrix<T>(
    decoded: &[Vec<T>],
    ground_truth: &[Vec<T>],
    mut score: impl FnMut(&T, &T) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    if decoded.iter().chain(ground_truth).any(|t| t.is_empty()) || decoded.is_empty() || ground_truth.is_empty() {
        return Err(Error::Eval("every track needs at least one chunk on both sides".into()));
    }
    decoded
        .iter()
        .map(|di| {
            ground_truth
                .iter()
                .map(|gj| {
                    let mut s = 0.0;
                    for a in di {
                        for b in gj {
                            s += score(a, b)?;
                        }
                    }
                    Ok(s / (di.len() * gj.len()) as f64)
                })
                .collect()
        })
        .collect()
}

/// Rows whose largest entry is on the diagonal (ties broken toward the
/// first column).
pub fn diagonal_argmax_rows(m: &[Vec<f64>]) -> usize {
    m.iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == *i
        })
        .count()
}

pub fn matrix_csv(m: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["decoded\\truth".to_string()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header)?;
    for (row, label) in m.iter().zip(row_labels) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Eval(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Eval(e.to_string()))
}

/// Binary graymap, each cell `cell × cell` pixels, min→black, max→white.
pub fn matrix_pgm(m: &[Vec<f64>], cell: usize) -> Result<Vec<u8>> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || m.iter().any(|r| r.len() != cols) || cell == 0 {
        return Err(Error::Eval("graymap needs a non-empty rectangular matrix".into()));
    }
    let lo = m.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", cols * cell, rows * cell).into_bytes();
    for row in m {
        let line: Vec<u8> = row.iter().flat_map(|v| std::iter::repeat_n((255.0 * (v - lo) / span).round() as u8, cell)).collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    Ok(out)
}

/// Identifies a decoded/ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairKey {
    pub track: usize,
    pub subject: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    #[serde(flatten)]
    pub key: PairKey,
    pub clap_score: f64,
    pub pearson_frame: f64,
    pub mse_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub fad_global: f64,
    pub fad_frame: f64,
    pub clap_score: f64,
    pub pearson_frame: f64,
    pub mse_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub notes: Vec<String>,
    pub pairs: Vec<PairScores>,
    pub aggregates: Aggregates,
    pub p_clap: SignificanceResult,
    pub p_pearson: SignificanceResult,
    pub p_mse: SignificanceResult,
}

impl MetricReport {
    pub fn pairs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["track", "subject", "chunk", "clap_score", "pearson_frame", "mse_frame"])?;
        for p in &self.pairs {
            w.write_record(&[
                p.key.track.to_string(),
                p.key.subject.to_string(),
                p.key.chunk.to_string(),
                format!("{:.6}", p.clap_score),
                format!("{:.6}", p.pearson_frame),
                format!("{:.6}", p.mse_frame),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Eval(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Eval(e.to_string()))
    }

    pub fn summary_text(&self) -> String {
        let a = &self.aggregates;
        let mut s = format!("# {}\n", self.label);
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "pairs = {}", self.pairs.len());
        let _ = writeln!(s, "fad_global = {:.6}", a.fad_global);
        let _ = writeln!(s, "fad_frame = {:.6}", a.fad_frame);
        let _ = writeln!(s, "clap_score = {:.6} (p = {:.5})", a.clap_score, self.p_clap.p_value);
        let _ = writeln!(s, "pearson_frame = {:.6} (p = {:.5})", a.pearson_frame, self.p_pearson.p_value);
        let _ = writeln!(s, "mse_frame = {:.6} (p = {:.5})", a.mse_frame, self.p_mse.p_value);
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(format!("{stem}.pairs.csv"), self.pairs_csv()?.as_bytes())?;
        put(format!("{stem}.summary.txt"), self.summary_text().as_bytes())?;
        put(format!("{stem}.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub embedder: EmbedderConfig,
    pub ridge: f64,
    pub resamples: usize,
    pub seed: u64,
    pub frames_per_second: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { embedder: EmbedderConfig::default(), ridge: DEFAULT_RIDGE, resamples: DEFAULT_RESAMPLES, seed: 0xb007, frames_per_second: 16.0 }
    }
}

/// Embedders plus metric settings.
#[derive(Clone, Debug)]
pub struct MetricSuite {
    pub config: MetricConfig,
    pub global: GlobalEmbedder,
    pub frame: FrameEmbedder,
}

impl MetricSuite {
    /// The global embedder center is fitted on `reference`.
    pub fn fit(config: &MetricConfig, reference: &[Tensor<f32>]) -> Result<Self> {
        Ok(Self {
            global: GlobalEmbedder::fit(&config.embedder, reference)?,
            frame: FrameEmbedder::new(&config.embedder)?,
            config: config.clone(),
        })
    }

    pub fn with_stats(config: &MetricConfig, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        Ok(Self {
            global: GlobalEmbedder::with_stats(&config.embedder, center, scale)?,
            frame: FrameEmbedder::new(&config.embedder)?,
            config: config.clone(),
        })
    }

    pub fn embed_all(&self, xs: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.global.embed(x)).collect()
    }

    /// Mean global-embedding score over aligned pairs.
    pub fn mean_clap(&self, gt: &[Tensor<f32>], decoded: &[Tensor<f32>]) -> Result<f64> {
        if gt.len() != decoded.len() || gt.is_empty() {
            return Err(Error::Eval(format!("{} ground truths for {} decoded items", gt.len(), decoded.len())));
        }
        let mut s = 0.0;
        for (a, b) in gt.iter().zip(decoded) {
            s += clap_score(&self.global.embed(a)?, &self.global.embed(b)?)?;
        }
        Ok(s / gt.len() as f64)
    }

    /// Full report for aligned pairs `(gt[i], decoded[i])`.
    pub fn report(&self, label: &str, keys: &[PairKey], gt: &[Tensor<f32>], decoded: &[Tensor<f32>]) -> Result<MetricReport> {
        let n = gt.len();
        if decoded.len() != n || keys.len() != n {
            return Err(Error::Eval(format!("{n} ground truths, {} decoded, {} keys", decoded.len(), keys.len())));
        }
        let fps = self.config.frames_per_second;
        let ge = self.embed_all(gt)?;
        let de = self.embed_all(decoded)?;
        let gf = gt.iter().map(|x| self.frame.embed(x, fps)).collect::<Result<Vec<_>>>()?;
        let df = decoded.iter().map(|x| self.frame.embed(x, fps)).collect::<Result<Vec<_>>>()?;

        let mut clap = vec![0.0; n * n];
        let mut pear = vec![0.0; n * n];
        let mut mse = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                clap[i * n + j] = clap_score(&ge[i], &de[j])?;
                pear[i * n + j] = pearson_frames(&gf[i], &df[j]).unwrap_or(0.0);
                mse[i * n + j] = mse_frames(&gf[i], &df[j])?;
            }
        }
        let pairs: Vec<PairScores> = (0..n)
            .map(|i| PairScores { key: keys[i].clone(), clap_score: clap[i * n + i], pearson_frame: pear[i * n + i], mse_frame: mse[i * n + i] })
            .collect();
        let mean = |f: fn(&PairScores) -> f64| pairs.iter().map(f).sum::<f64>() / n.max(1) as f64;
        let gm: Vec<Vec<f64>> = gf.iter().map(FrameEmbeddingSeq::mean_frame).collect();
        let dm: Vec<Vec<f64>> = df.iter().map(FrameEmbeddingSeq::mean_frame).collect();
        let ridge = self.config.ridge;
        let aggregates = Aggregates {
            fad_global: fad(&ge, &de, ridge)?,
            fad_frame: fad(&gm, &dm, ridge)?,
            clap_score: mean(|p| p.clap_score),
            pearson_frame: mean(|p| p.pearson_frame),
            mse_frame: mean(|p| p.mse_frame),
        };
        let (r, s) = (self.config.resamples, self.config.seed);
        Ok(MetricReport {
            label: label.to_string(),
            notes: vec![
                "frame FAD: Gaussian fitted over per-chunk mean frame embeddings".into(),
                "bootstrap null: decoded indices resampled with replacement against fixed ground-truth order".into(),
                format!("covariance ridge {ridge:e}; diagonal shrinkage when samples < dims; {r} resamples, seed {s}"),
            ],
            pairs,
            aggregates,
            p_clap: bootstrap_table(&clap, n, r, s, Direction::HigherBetter)?,
            p_pearson: bootstrap_table(&pear, n, r, s, Direction::HigherBetter)?,
            p_mse: bootstrap_table(&mse, n, r, s, Direction::LowerBetter)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn spec(seed: u64) -> Tensor<f32> {
        Tensor::<f32>::randn(&[64, 56], &mut rng(seed)).map(|v| v.abs())
    }

    fn unit(d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| normal(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn global_embedding_unit_and_deterministic() {
        let e = GlobalEmbedder::new(&EmbedderConfig::default()).unwrap();
        for s in 0..10 {
            let v = e.embed(&spec(s)).unwrap();
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            assert_eq!(v, e.embed(&spec(s)).unwrap());
        }
        let zero = e.embed(&Tensor::zeros(&[1, 64, 56])).unwrap();
        assert_eq!(zero[0], 1.0);
        assert!(zero[1..].iter().all(|&v| v == 0.0));
        assert!(e.embed(&Tensor::zeros(&[2, 64, 56])).is_err());
        assert!(e.embed(&Tensor::zeros(&[32, 56])).is_err());
    }

    #[test]
    fn global_embedding_ignores_frame_order() {
        let e = GlobalEmbedder::fit(&EmbedderConfig::default(), &[spec(1), spec(2)]).unwrap();
        let x = spec(3);
        let rev = Tensor::from_fn(&[64, 56], |i| x.data()[(i / 56) * 56 + 55 - i % 56]);
        assert_ne!(x, rev);
        let (a, b) = (e.embed(&x).unwrap(), e.embed(&rev).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn fitted_center_zeroes_corpus_mean() {
        let corpus: Vec<_> = (0..50).map(spec).collect();
        let e = GlobalEmbedder::fit(&EmbedderConfig::default(), &corpus).unwrap();
        let mut mean_feat = vec![0.0; 32];
        for x in &corpus {
            for (m, f) in mean_feat.iter_mut().zip(e.features(x).unwrap()) {
                *m += f / 50.0;
            }
        }
        assert!(mean_feat.iter().zip(e.center()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn fitted_scale_is_feature_std() {
        let corpus: Vec<_> = (0..50).map(spec).collect();
        let cfg = EmbedderConfig::default();
        let e = GlobalEmbedder::fit(&cfg, &corpus).unwrap();
        let feats: Vec<_> = corpus.iter().map(|x| e.features(x).unwrap()).collect();
        for k in 0..32 {
            let var = feats.iter().map(|f| (f[k] - e.center()[k]).powi(2)).sum::<f64>() / 50.0;
            let want = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
            assert!((e.scale()[k] - want).abs() < 1e-9);
        }
        // one constant input: no spread, every scale falls back to 1
        let flat = GlobalEmbedder::fit(&cfg, &corpus[..1]).unwrap();
        assert!(flat.scale().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn uniform_scale_leaves_embedding_unchanged() {
        let cfg = EmbedderConfig::default();
        let c: Vec<f64> = (0..32).map(|k| k as f64 * 0.01).collect();
        let base = GlobalEmbedder::with_center(&cfg, c.clone()).unwrap();
        let uniform = GlobalEmbedder::with_stats(&cfg, c.clone(), vec![3.0; 32]).unwrap();
        let skewed = GlobalEmbedder::with_stats(&cfg, c.clone(), (1..=32).map(|k| k as f64).collect()).unwrap();
        let x = spec(4);
        let (a, b, d) = (base.embed(&x).unwrap(), uniform.embed(&x).unwrap(), skewed.embed(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        assert!(a.iter().zip(&d).any(|(p, q)| (p - q).abs() > 1e-3));
        assert!(GlobalEmbedder::with_stats(&cfg, c.clone(), vec![0.0; 32]).is_err());
        assert!(GlobalEmbedder::with_stats(&cfg, c, vec![1.0; 31]).is_err());
    }

    #[test]
    fn frame_embedding_cases() {
        let f = FrameEmbedder::new(&EmbedderConfig::default()).unwrap();
        let c = f.embed(&Tensor::full(&[64, 56], 0.7f32), 16.0).unwrap();
        assert_eq!(c.frames, 14);
        assert_eq!(c.frame_rate, 4.0);
        assert!((1..14).all(|k| c.frame(k) == c.frame(0)));
        assert_eq!(f.embed(&spec(0).reshape(&[64, 56]).unwrap(), 16.0).unwrap().frames, 14);
        let odd = Tensor::from_fn(&[64, 59], |i| i as f32);
        assert_eq!(f.embed(&odd, 16.0).unwrap().frames, 59 / 4);
        assert!(f.embed(&Tensor::zeros(&[64, 3]), 16.0).is_err());
    }

    #[test]
    fn frame_embedding_is_local() {
        let f = FrameEmbedder::new(&EmbedderConfig::default()).unwrap();
        let x = spec(5);
        let all = f.embed(&x, 16.0).unwrap();
        for k in [0, 6, 13] {
            let w = Tensor::from_fn(&[64, 4], |i| x.data()[(i / 4) * 56 + 4 * k + i % 4]);
            let one = f.embed(&w, 16.0).unwrap();
            assert_eq!(one.frames, 1);
            assert!(one.frame(0).iter().zip(all.frame(k)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn gaussian_fit_cases() {
        let g = fit_gaussian(&[vec![1.0, 2.0], vec![3.0, -2.0]], 0.0).unwrap();
        assert_eq!(g.mean.as_slice(), &[2.0, 0.0]);
        let same = fit_gaussian(&vec![vec![0.3, -1.0, 2.0]; 5], 1e-6).unwrap();
        assert!((same.cov.clone() - DMatrix::identity(3, 3) * 1e-6).amax() < 1e-15);
        assert!(fit_gaussian(&[vec![1.0]], 0.0).is_err());
        assert!(fit_gaussian(&[vec![1.0], vec![1.0, 2.0]], 0.0).is_err());
        // fewer samples than dims: diagonal
        let s = fit_gaussian(&[vec![1.0, 2.0, 3.0], vec![2.0, 0.0, 1.0]], 0.0).unwrap();
        assert!(s.shrunk);
        assert_eq!(s.cov[(0, 1)], 0.0);
    }

    #[test]
    fn gaussian_fit_monte_carlo() {
        let sd = [0.5, 1.0, 2.0, 3.0];
        let mut r = rng(7);
        let xs: Vec<Vec<f64>> = (0..1000).map(|_| sd.iter().map(|s| s * normal(&mut r)).collect()).collect();
        let g = fit_gaussian(&xs, DEFAULT_RIDGE).unwrap();
        for (i, s) in sd.iter().enumerate() {
            assert!((g.cov[(i, i)] / (s * s) - 1.0).abs() < 0.1, "{i}: {}", g.cov[(i, i)]);
        }
    }

    #[test]
    fn sqrtm_cases() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&i3).unwrap() - &i3).amax() < 1e-12);
        let d = sqrtm_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((d - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-12);
        assert!(sqrtm_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(sqrtm_psd(&DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])).is_err());
        // tiny negative eigenvalue is clipped
        let c = sqrtm_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-10])).unwrap();
        assert_eq!(c[(1, 1)], 0.0);
    }

    fn random_psd(d: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| normal(r));
        &b * b.transpose()
    }

    #[test]
    fn sqrtm_reconstructs_up_to_64() {
        let mut r = rng(3);
        for d in [1, 2, 5, 16, 33, 64] {
            let a = random_psd(d, &mut r);
            let s = sqrtm_psd(&a).unwrap();
            assert!((&s * &s - &a).norm() <= 1e-6 * a.norm(), "dim {d}");
        }
    }

    /// Samples with exactly the given per-dim mean and unbiased std: ±1
    /// pairs scaled by sd·sqrt((n−1)/n).
    fn moment_set(mean: &[f64], sd: &[f64], n: usize) -> Vec<Vec<f64>> {
        let k = ((n - 1) as f64 / n as f64).sqrt();
        (0..n)
            .map(|i| {
                mean.iter()
                    .zip(sd)
                    .enumerate()
                    // alternate the sign pattern per dim so the sample covariance is diagonal
                    .map(|(d, (m, s))| {
                        let sign = if (i >> d) & 1 == 0 { 1.0 } else { -1.0 };
                        m + sign * s * k
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fad_one_dim_closed_form() {
        let a = moment_set(&[0.0], &[1.0], 2);
        let b = moment_set(&[1.0], &[1.0], 2);
        let ga = fit_gaussian(&a, 0.0).unwrap();
        assert!((ga.cov[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((fad(&a, &b, DEFAULT_RIDGE).unwrap() - 1.0).abs() < 1e-9);
        assert!((fad(&a, &moment_set(&[0.0], &[3.0], 2), 0.0).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn fad_diagonal_closed_form() {
        let mut r = rng(11);
        for d in [1usize, 2, 4, 8, 16] {
            // 2^d sign patterns are exactly orthogonal; cap d at 16 → 65536 rows
            let n = 1usize << d.min(16);
            let m1: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let m2: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let s1: Vec<f64> = (0..d).map(|_| r.random_range(0.2..3.0)).collect();
            let s2: Vec<f64> = (0..d).map(|_| r.random_range(0.2..3.0)).collect();
            let a = moment_set(&m1, &s1, n);
            let b = moment_set(&m2, &s2, n);
            let want: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2) + (s1[i] - s2[i]).powi(2)).sum();
            let got = fad(&a, &b, 0.0).unwrap();
            assert!((got - want).abs() < 1e-6, "dim {d}: {got} vs {want}");
        }
    }

    #[test]
    fn fad_identical_and_symmetric() {
        let mut r = rng(2);
        let a: Vec<Vec<f64>> = (0..100).map(|_| unit(8, &mut r)).collect();
        let b: Vec<Vec<f64>> = (0..80).map(|_| unit(8, &mut r)).collect();
        assert!(fad(&a, &a, DEFAULT_RIDGE).unwrap() < 1e-6);
        let (x, y) = (fad(&a, &b, DEFAULT_RIDGE).unwrap(), fad(&b, &a, DEFAULT_RIDGE).unwrap());
        assert!((x - y).abs() < 1e-6 && x > 0.0);
        assert!(fad(&a, &[vec![0.0; 7], vec![1.0; 7]], 0.0).is_err());
    }

    #[test]
    fn pearson_cases() {
        let e = [1.0, 2.0, 3.0];
        assert!((pearson(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&e, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // deviations (−1,0,1) and (−7/3,−1/3,8/3): r = 5/sqrt(2·114/9) = 15/sqrt(228)
        assert!((pearson(&e, &[2.0, 4.0, 7.0]).unwrap() - 15.0 / 228f64.sqrt()).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn clap_cases() {
        let mut r = rng(4);
        let e = unit(16, &mut r);
        assert!((clap_score(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(clap_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(clap_score(&[1.0, 0.1], &[0.0, 1.0]).is_err());
    }

    /// Exactly zero-mean unit-norm vector.
    fn zero_mean_unit(d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| normal(r)).collect();
        let m = v.iter().sum::<f64>() / d as f64;
        let v: Vec<f64> = v.iter().map(|x| x - m).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn clap_equals_pearson_on_zero_mean_unit_vectors() {
        let mut r = rng(5);
        for _ in 0..100 {
            let (a, b) = (zero_mean_unit(64, &mut r), zero_mean_unit(64, &mut r));
            assert!((clap_score(&a, &b).unwrap() - pearson(&a, &b).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_cases() {
        let a = FrameEmbeddingSeq::new(1, 2, vec![3.0, 4.0], 1.0).unwrap();
        let z = FrameEmbeddingSeq::new(1, 2, vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(mse_frames(&a, &z).unwrap(), 25.0);
        assert_eq!(mse_frames(&a, &a).unwrap(), 0.0);
        let mut r = rng(6);
        let p: Vec<f64> = (0..42).map(|_| normal(&mut r)).collect();
        let q: Vec<f64> = (0..42).map(|_| normal(&mut r)).collect();
        let (ea, eb) = (FrameEmbeddingSeq::new(7, 6, p.clone(), 4.0).unwrap(), FrameEmbeddingSeq::new(7, 6, q.clone(), 4.0).unwrap());
        let mut want = 0.0;
        for k in 0..7 {
            for d in 0..6 {
                want += (p[k * 6 + d] - q[k * 6 + d]).powi(2);
            }
        }
        assert!((mse_frames(&ea, &eb).unwrap() - want / 7.0).abs() < 1e-9);
        assert!(mse_frames(&ea, &a).is_err());
    }

    #[test]
    fn bootstrap_constant_metric_gives_one() {
        let r = bootstrap_p(5, |_, _| Ok(0.3), 200, 1, Direction::HigherBetter).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = bootstrap_p(5, |_, _| Ok(0.3), 200, 1, Direction::LowerBetter).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(bootstrap_p(1, |_, _| Ok(0.0), 10, 1, Direction::HigherBetter).is_err());
        assert!(bootstrap_p(3, |i, j| if i == 2 && j == 0 { Err(Error::Eval("x".into())) } else { Ok(0.0) }, 10, 1, Direction::HigherBetter).is_err());
    }

    #[test]
    fn bootstrap_detects_matching_pairs() {
        let mut r = rng(8);
        let items: Vec<Vec<f64>> = (0..24).map(|_| unit(64, &mut r)).collect();
        let res = bootstrap_p(24, |i, j| clap_score(&items[i], &items[j]), DEFAULT_RESAMPLES, 3, Direction::HigherBetter).unwrap();
        assert!(res.p_value <= 0.01, "{}", res.p_value);
        assert!(res.p_value > 0.0);
        assert_eq!(res.resamples, 4000);
        let again = bootstrap_p(24, |i, j| clap_score(&items[i], &items[j]), DEFAULT_RESAMPLES, 3, Direction::HigherBetter).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn cross_matrix_cases() {
        let m = cross_score_matrix(&[vec![1.0, 2.0]], &[vec![3.0]], |a: &f64, b: &f64| Ok(a * b)).unwrap();
        assert_eq!(m, vec![vec![4.5]]);
        let c = cross_score_matrix(&[vec![0; 2], vec![0; 3]], &[vec![0; 1], vec![0; 4]], |_, _| Ok(0.25)).unwrap();
        assert!(c.iter().flatten().all(|&v| v == 0.25));
        assert!(cross_score_matrix::<u8>(&[vec![]], &[vec![1]], |_, _| Ok(0.0)).is_err());

        // near-orthogonal track centroids with small per-chunk jitter
        let mut r = rng(9);
        let tracks: Vec<Vec<Vec<f64>>> = (0..8)
            .map(|_| {
                let c = unit(64, &mut r);
                (0..4)
                    .map(|_| {
                        let v: Vec<f64> = c.iter().map(|x| x + 0.05 * normal(&mut r)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.iter().map(|x| x / n).collect()
                    })
                    .collect()
            })
            .collect();
        let m = cross_score_matrix(&tracks, &tracks, |a, b| clap_score(a, b)).unwrap();
        assert_eq!(diagonal_argmax_rows(&m), 8);
    }

    #[test]
    fn matrix_outputs() {
        let m = vec![vec![0.0, 1.0], vec![0.5, 0.25]];
        let labels = vec!["t0".to_string(), "t1".to_string()];
        let csv = matrix_csv(&m, &labels, &labels).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("t0,0.000000,1.000000"));
        let pgm = matrix_pgm(&m, 3).unwrap();
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 36);
        assert_eq!(pgm[header.len()], 0);
        assert_eq!(pgm[header.len() + 3], 255);
    }

    #[test]
    fn report_for_perfect_decoding() {
        let gt: Vec<Tensor<f32>> = (0..12).map(spec).collect();
        let cfg = MetricConfig { resamples: 500, ..Default::default() };
        let suite = MetricSuite::fit(&cfg, &gt).unwrap();
        let keys: Vec<PairKey> = (0..12).map(|i| PairKey { track: i / 4, subject: 0, chunk: i % 4 }).collect();
        let rep = suite.report("copy", &keys, &gt, &gt).unwrap();
        assert!((rep.aggregates.clap_score - 1.0).abs() < 1e-9);
        assert!(rep.aggregates.fad_global < 1e-6 && rep.aggregates.fad_frame < 1e-6);
        assert_eq!(rep.aggregates.mse_frame, 0.0);
        assert!(rep.p_clap.p_value < 0.01);
        let csv = rep.pairs_csv().unwrap();
        assert_eq!(csv.lines().count(), 13);
        assert!(rep.summary_text().contains("per-chunk mean frame embeddings"));
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path(), "copy").unwrap();
        assert!(dir.path().join("copy.pairs.csv").exists());
    }

    proptest! {
        #[test]
        fn pearson_bounded_and_affine_invariant(seed in 0u64..2000, a in 0.01f64..50.0, b in -20.0f64..20.0) {
            let mut r = rng(seed);
            let e: Vec<f64> = (0..12).map(|_| normal(&mut r)).collect();
            let f: Vec<f64> = (0..12).map(|_| normal(&mut r)).collect();
            let p = pearson(&e, &f).unwrap();
            prop_assert!((-1.0..=1.0).contains(&p));
            let ea: Vec<f64> = e.iter().map(|x| a * x + b).collect();
            prop_assert!((pearson(&ea, &f).unwrap() - p).abs() < 1e-9);
            prop_assert!((pearson(&e, &ea.iter().map(|x| x * 2.0).collect::<Vec<_>>()).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn fad_properties(seed in 0u64..500, n in 3usize..40) {
            let mut r = rng(seed);
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| normal(&mut r)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..n + 2).map(|_| (0..6).map(|_| 1.5 * normal(&mut r)).collect()).collect();
            prop_assert!(fad(&a, &a, DEFAULT_RIDGE).unwrap() < 1e-6);
            let (x, y) = (fad(&a, &b, DEFAULT_RIDGE).unwrap(), fad(&b, &a, DEFAULT_RIDGE).unwrap());
            prop_assert!(x >= 0.0 && (x - y).abs() < 1e-6);
        }

        #[test]
        fn sqrtm_random_psd(seed in 0u64..200, d in 1usize..24) {
            let a = random_psd(d, &mut rng(seed));
            let s = sqrtm_psd(&a).unwrap();
            prop_assert!((&s * &s - &a).norm() <= 1e-6 * a.norm());
        }

        #[test]
        fn bootstrap_p_positive_and_seeded(seed in 0u64..100) {
            let mut r = rng(seed);
            let v: Vec<f64> = (0..36).map(|_| normal(&mut r)).collect();
            let a = bootstrap_table(&v, 6, 50, seed, Direction::LowerBetter).unwrap();
            prop_assert!(a.p_value > 0.0 && a.p_value <= 1.0);
            prop_assert_eq!(a, bootstrap_table(&v, 6, 50, seed, Direction::LowerBetter).unwrap());
        }
    }
}
