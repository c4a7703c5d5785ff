//! Training loops and proxy validation.
//!
//! Every mode runs the same loop over one parameter tree: seeded batch
//! draw, loss on a fresh tape, Adam on the trainable entries, and a
//! validation score every `validation_interval` steps. The best-scoring
//! parameters are kept. In adapter mode θ sits in the same tree with
//! `trainable = false`, so the optimizer never touches it.

use std::path::{Path, PathBuf};

use ndcore::{AdamConfig, OptimizerState, ParameterTree, Tape, Tensor, Var};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::controlnet::{ControlNet, Projector, ProjectorConfig};
use crate::datakit::{stack, PairedExample};
use crate::denoiser::{denoising_loss, UNet};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::evalkit::{clap_score, GlobalEmbedder};
use crate::latentvae::{ConvVae, LatentNorm, Vae};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Vae,
    Diffusion,
    Adapter,
    ScratchJoint,
    Regressor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_interval: usize,
    /// DDIM steps used by the validation proxy.
    pub validation_sampler_steps: usize,
    /// Clip limit for ẑ₀ during sampling, in normalized latent units.
    pub sampler_clip: Option<f64>,
    /// Exponential moving average of the trainable weights. Validation,
    /// checkpoints and the returned best model use the averaged weights.
    pub ema_decay: Option<f64>,
    /// Validation pairs scored per validation (evenly spaced subset).
    pub validation_items: usize,
    pub seed: u64,
    pub subject_layer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Adapter,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            validation_interval: 500,
            validation_sampler_steps: 20,
            sampler_clip: None,
            ema_decay: None,
            validation_items: 32,
            seed: 0,
            subject_layer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.validation_interval == 0 || self.validation_items == 0 {
            return Err(Error::Config("batch size, validation interval and items must be positive".into()));
        }
        if self.steps < self.validation_interval {
            return Err(Error::Config(format!(
                "{} steps are fewer than the validation interval {}",
                self.steps, self.validation_interval
            )));
        }
        if self.validation_sampler_steps == 0 {
            return Err(Error::Config("validation needs at least one sampler step".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay must be in [0, 1), got {d}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_step: usize,
    pub best_score: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let l = self.losses();
        let w = window.max(1);
        (w..=l.len()).map(|e| l[e - w..e].iter().sum::<f64>() / w as f64).collect()
    }

    /// `1 − last/first` of the smoothed curve.
    pub fn smoothed_decrease(&self, window: usize) -> Option<f64> {
        let s = self.smoothed(window);
        match (s.first(), s.last()) {
            (Some(a), Some(b)) if *a > 0.0 => Some(1.0 - b / a),
            _ => None,
        }
    }

    /// One JSON record per step, then a summary file.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for s in &self.steps {
            lines.push_str(&serde_json::to_string(s)?);
            lines.push('\n');
        }
        for v in &self.validations {
            lines.push_str(&serde_json::to_string(&serde_json::json!({ "step": v.step, "validation": v.score }))?);
            lines.push('\n');
        }
        let p = dir.join(format!("{stem}.log.jsonl"));
        std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
        let summary = serde_json::json!({
            "steps": self.steps.len(),
            "first_loss": self.steps.first().map(|s| s.loss),
            "last_loss": self.steps.last().map(|s| s.loss),
            "smoothed_decrease_50": self.smoothed_decrease(50),
            "validations": self.validations,
            "best_step": self.best_step,
            "best_score": self.best_score,
            "checkpoints": self.checkpoints,
        });
        let p = dir.join(format!("{stem}.summary.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))
    }
}

/// Result of a run: the log plus best and final parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best: ParameterTree<f32>,
    pub last: ParameterTree<f32>,
}

/// Where to write checkpoints (one per validation), if anywhere.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
    pub stem: String,
    pub meta: serde_json::Value,
}

/// Seeded batch of distinct indices (with replacement across steps).
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let mut rng = seed::rng(seed, &[seed::label("batch"), step as u64]);
    Ok(sample(&mut rng, n, batch.min(n)).into_vec())
}

/// The shared loop.
pub fn optimize(
    cfg: &TrainConfig,
    mut tree: ParameterTree<f32>,
    mut loss: impl FnMut(&mut Tape<f32>, &ParameterTree<f32>, usize) -> Result<Var>,
    mut validate: impl FnMut(&ParameterTree<f32>) -> Result<f64>,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !tree.iter().any(|(_, p)| p.trainable) {
        return Err(Error::Config("nothing to train: every parameter is frozen".into()));
    }
    let mut opt = OptimizerState::new(cfg.adam());
    let mut log = TrainLog { best_score: f64::NEG_INFINITY, ..Default::default() };
    let mut best = tree.clone();
    let mut ema = cfg.ema_decay.map(|_| tree.clone());
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let l = loss(&mut tape, &tree, step)?;
        let value = tape.value(l).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(l)?.param_grads();
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        tree.absorb_grads(&grads)?;
        opt.step(&mut tree)?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
            // warmup keeps early averages from clinging to the initialization
            let d = decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema_update(avg, &tree, d)?;
        }
        log.steps.push(StepRecord { step, loss: value });
        if step % cfg.validation_interval == 0 || step == cfg.steps {
            let current = ema.as_ref().unwrap_or(&tree);
            let score = validate(current)?;
            log.validations.push(ValidationRecord { step, score });
            if let Some(dir) = &sink.dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(format!("{}-step{step:06}.ndtc", sink.stem));
                let meta = serde_json::json!({ "step": step, "score": score, "run": sink.meta });
                current.save(&p, meta)?;
                log.checkpoints.push(p);
            }
            if score > log.best_score {
                log.best_score = score;
                log.best_step = step;
                best = current.clone();
            }
        }
    }
    let mut last = ema.unwrap_or(tree);
    last.clear_grads();
    best.clear_grads();
    Ok(TrainOutcome { log, best, last })
}

/// `avg ← d·avg + (1 − d)·current` on trainable parameters; frozen ones are
/// left untouched.
fn ema_update(avg: &mut ParameterTree<f32>, current: &ParameterTree<f32>, d: f64) -> Result<()> {
    for (name, p) in current.iter() {
        if !p.trainable {
            continue;
        }
        let a = avg.tensor(name)?;
        let next = a.zip_map(p.value(), |a, c| (d * a as f64 + (1.0 - d) * c as f64) as f32)?;
        avg.set_tensor(name, next)?;
    }
    Ok(())
}

/// Training inputs in latent space.
#[derive(Clone, Debug)]
pub struct LatentSet {
    /// Normalized latents `[n, D_z, F_z, S_z]`.
    pub z: Tensor<f32>,
    /// `[n, F_y, S_y]`
    pub y: Tensor<f32>,
    pub subjects: Vec<usize>,
    /// Ground-truth spectrograms `[F_x, S_x]`.
    pub x: Vec<Tensor<f32>>,
}

impl LatentSet {
    /// Encodes every example with the posterior mean.
    pub fn build(examples: &[PairedExample], vae: &Vae, norm: &LatentNorm) -> Result<Self> {
        let refs: Vec<&PairedExample> = examples.iter().collect();
        let (y, x, subjects) = stack(&refs)?;
        let z = norm.normalize(&vae.encode_mean(&x)?)?;
        Ok(Self { z, y, subjects, x: examples.iter().map(|e| e.x.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>, Vec<usize>) {
        let z = Tensor::concat0(&idx.iter().map(|&i| self.z.sample(i)).collect::<Vec<_>>()).expect("same shapes");
        let y = Tensor::concat0(&idx.iter().map(|&i| self.y.sample(i)).collect::<Vec<_>>()).expect("same shapes");
        (z, y, idx.iter().map(|&i| self.subjects[i]).collect())
    }

    /// Evenly spaced subset of at most `k` items.
    pub fn subset(&self, k: usize) -> Self {
        let n = self.len();
        let idx: Vec<usize> = if k >= n { (0..n).collect() } else { (0..k).map(|i| i * n / k).collect() };
        let (z, y, subjects) = self.batch(&idx);
        Self { z, y, subjects, x: idx.iter().map(|&i| self.x[i].clone()).collect() }
    }
}

/// Fits the latent standardization on training spectrograms.
pub fn fit_latent_norm(examples: &[PairedExample], vae: &Vae) -> Result<LatentNorm> {
    let refs: Vec<&PairedExample> = examples.iter().collect();
    let (_, x, _) = stack(&refs)?;
    LatentNorm::fit(&vae.encode_mean(&x)?)
}

/// Normalized latents back to `[F_x, S_x]` spectrograms.
pub fn decode_latents(vae: &Vae, norm: &LatentNorm, z: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let x = vae.decode(&norm.denormalize(z)?)?;
    let (f, s) = (x.dim(2), x.dim(3));
    (0..x.dim(0)).map(|i| Ok(x.sample(i).reshape(&[f, s])?)).collect()
}

/// Mean global-embedding score of decoded vs ground truth.
pub fn proxy_score(embedder: &GlobalEmbedder, decoded: &[Tensor<f32>], truth: &[Tensor<f32>]) -> Result<f64> {
    if decoded.len() != truth.len() || truth.is_empty() {
        return Err(Error::Eval(format!("{} decoded items for {} ground truths", decoded.len(), truth.len())));
    }
    let mut s = 0.0;
    for (d, t) in decoded.iter().zip(truth) {
        s += clap_score(&embedder.embed(d)?, &embedder.embed(t)?)?;
    }
    Ok(s / truth.len() as f64)
}

/// Conditional DDIM samples for every row of `y`.
pub fn sample_adapter(
    cn: &ControlNet,
    params: &ParameterTree<f32>,
    y: &Tensor<f32>,
    subjects: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    clip: Option<f64>,
    seed: u64,
) -> Result<Tensor<f32>> {
    let [dz, fz, sz] = cn.latent_shape();
    let n = subjects.len();
    diffusion::sample_clipped(|z, t| cn.fused_forward(params, params, z, y, subjects, &vec![t; n]), schedule, steps, &[n, dz, fz, sz], seed, clip)
}

pub fn sample_unconditional(
    unet: &UNet,
    theta: &ParameterTree<f32>,
    n: usize,
    latent: [usize; 3],
    schedule: &NoiseSchedule,
    steps: usize,
    clip: Option<f64>,
    seed: u64,
) -> Result<Tensor<f32>> {
    let [dz, fz, sz] = latent;
    diffusion::sample_clipped(|z, t| Ok(unet.forward(theta, z, &vec![t; n])?.0), schedule, steps, &[n, dz, fz, sz], seed, clip)
}

/// Shared context of the latent-space modes.
pub struct LatentContext<'a> {
    pub vae: &'a Vae,
    pub norm: &'a LatentNorm,
    pub schedule: &'a NoiseSchedule,
    pub embedder: &'a GlobalEmbedder,
}

fn validation_seed(cfg: &TrainConfig) -> u64 {
    seed::derive(cfg.seed, &[seed::label("validate")])
}

/// Unconditional U-Net (the pretrained model θ). Validation compares
/// unconditional samples with the validation chunks.
pub fn train_diffusion(
    cfg: &TrainConfig,
    unet: &UNet,
    theta: ParameterTree<f32>,
    train: &LatentSet,
    val: &LatentSet,
    ctx: &LatentContext,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    let val = val.subset(cfg.validation_items);
    let latent = [train.z.dim(1), train.z.dim(2), train.z.dim(3)];
    let vseed = validation_seed(cfg);
    optimize(
        cfg,
        theta,
        |tape, tree, step| {
            let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step)?;
            let (z, _, _) = train.batch(&idx);
            denoising_loss(tape, unet, tree, &z, ctx.schedule, seed::derive(cfg.seed, &[seed::label("noise"), step as u64]))
        },
        |tree| {
            let z = sample_unconditional(unet, tree, val.len(), latent, ctx.schedule, cfg.validation_sampler_steps, cfg.sampler_clip, vseed)?;
            proxy_score(ctx.embedder, &decode_latents(ctx.vae, ctx.norm, &z)?, &val.x)
        },
        sink,
    )
}

/// θ and φ in one tree. Adapter mode freezes θ; scratch-joint trains both.
pub fn joint_tree(theta: &ParameterTree<f32>, phi: &ParameterTree<f32>, train_theta: bool) -> Result<ParameterTree<f32>> {
    let mut all = theta.clone();
    all.set_trainable(train_theta);
    let mut phi = phi.clone();
    phi.set_trainable(true);
    all.merge(phi)?;
    Ok(all)
}

/// Splits a joint tree back into (θ, φ).
pub fn split_tree(all: &ParameterTree<f32>) -> (ParameterTree<f32>, ParameterTree<f32>) {
    (all.remap_prefix("unet.", "unet."), all.remap_prefix("ctrl.", "ctrl."))
}

/// Adapter training (`Adapter` or `ScratchJoint` mode). `params` is a
/// [`joint_tree`]. Validation samples conditioned on each validation y.
pub fn train_adapter(
    cfg: &TrainConfig,
    cn: &ControlNet,
    params: ParameterTree<f32>,
    train: &LatentSet,
    val: &LatentSet,
    ctx: &LatentContext,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    match cfg.mode {
        TrainMode::Adapter | TrainMode::ScratchJoint => {}
        m => return Err(Error::Config(format!("train_adapter called in {m:?} mode"))),
    }
    if cfg.subject_layer != cn.subject_count().is_some() {
        return Err(Error::Config("subject-layer toggle disagrees with the adapter structure".into()));
    }
    let val = val.subset(cfg.validation_items);
    let vseed = validation_seed(cfg);
    optimize(
        cfg,
        params,
        |tape, tree, step| {
            let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step)?;
            let (z, y, subjects) = train.batch(&idx);
            let s = seed::derive(cfg.seed, &[seed::label("noise"), step as u64]);
            cn.adapter_loss(tape, tree, tree, &z, &y, &subjects, ctx.schedule, s)
        },
        |tree| {
            let z = sample_adapter(cn, tree, &val.y, &val.subjects, ctx.schedule, cfg.validation_sampler_steps, cfg.sampler_clip, vseed)?;
            proxy_score(ctx.embedder, &decode_latents(ctx.vae, ctx.norm, &z)?, &val.x)
        },
        sink,
    )
}

pub const REGRESSOR_PREFIX: &str = "reg.proj";
pub const REGRESSOR_SUBJECT: &str = "reg.subject.weight";

/// Direct regression baseline: optional subject layer, then a
/// projector-shaped conv net predicting the normalized latent from y.
#[derive(Clone, Debug)]
pub struct Regressor {
    projector: Projector,
    subject_count: Option<usize>,
    eeg_channels: usize,
}

impl Regressor {
    pub fn new(cfg: &ProjectorConfig, subject_count: Option<usize>, eeg_channels: usize, eeg_len: usize, latent: [usize; 3]) -> Result<Self> {
        if subject_count == Some(0) {
            return Err(Error::Config("subject layer needs at least one subject".into()));
        }
        Ok(Self { projector: Projector::new(REGRESSOR_PREFIX, cfg, eeg_channels, eeg_len, latent)?, subject_count, eeg_channels })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterTree<f32>> {
        let mut tree = ParameterTree::new();
        self.projector.init(&mut tree, &mut seed::rng(seed, &[seed::label("regressor")]))?;
        if let Some(s) = self.subject_count {
            let c = self.eeg_channels;
            tree.insert(REGRESSOR_SUBJECT, Tensor::from_fn(&[s, c, c], |i| if (i / c) % c == i % c { 1.0 } else { 0.0 }), true)?;
        }
        Ok(tree)
    }

    pub fn forward_var(&self, tape: &mut Tape<f32>, tree: &ParameterTree<f32>, y: Var, subjects: &[usize]) -> Result<Var> {
        let y = match self.subject_count {
            Some(_) => {
                let w = tape.param(tree, REGRESSOR_SUBJECT)?;
                tape.channel_mix(y, w, subjects)?
            }
            None => y,
        };
        self.projector.apply(tape, tree, y)
    }

    pub fn predict(&self, tree: &ParameterTree<f32>, y: &Tensor<f32>, subjects: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::no_grad();
        let yv = tape.input(y.clone());
        let out = self.forward_var(&mut tape, tree, yv, subjects)?;
        Ok(tape.value(out).clone())
    }

    pub fn loss(&self, tape: &mut Tape<f32>, tree: &ParameterTree<f32>, z: &Tensor<f32>, y: &Tensor<f32>, subjects: &[usize]) -> Result<Var> {
        let yv = tape.input(y.clone());
        let pred = self.forward_var(tape, tree, yv, subjects)?;
        if tape.shape(pred) != z.shape() {
            return Err(shape_err("regressor target", tape.shape(pred), z.shape()));
        }
        let target = tape.input(z.clone());
        Ok(tape.mse(pred, target)?)
    }
}

pub fn train_regressor(
    cfg: &TrainConfig,
    reg: &Regressor,
    params: ParameterTree<f32>,
    train: &LatentSet,
    val: &LatentSet,
    ctx: &LatentContext,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    let val = val.subset(cfg.validation_items);
    optimize(
        cfg,
        params,
        |tape, tree, step| {
            let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step)?;
            let (z, y, subjects) = train.batch(&idx);
            reg.loss(tape, tree, &z, &y, &subjects)
        },
        |tree| {
            let z = reg.predict(tree, &val.y, &val.subjects)?;
            proxy_score(ctx.embedder, &decode_latents(ctx.vae, ctx.norm, &z)?, &val.x)
        },
        sink,
    )
}

/// Conv VAE on spectrogram batches. Validation decodes the posterior mean.
pub fn train_vae(
    cfg: &TrainConfig,
    model: &ConvVae,
    params: ParameterTree<f32>,
    train: &[Tensor<f32>],
    val: &[Tensor<f32>],
    embedder: &GlobalEmbedder,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    let grid = |xs: &[&Tensor<f32>]| -> Result<Tensor<f32>> {
        let parts = xs.iter().map(|x| Ok((*x).clone().reshape(&[1, 1, x.dim(0), x.dim(1)])?)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat0(&parts)?)
    };
    let step_val: Vec<&Tensor<f32>> = {
        let n = val.len();
        let k = cfg.validation_items.min(n);
        (0..k).map(|i| &val[i * n / k]).collect()
    };
    if step_val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let vx = grid(&step_val)?;
    let truth: Vec<Tensor<f32>> = step_val.iter().map(|t| (*t).clone()).collect();
    optimize(
        cfg,
        params,
        |tape, tree, step| {
            let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step)?;
            let x = grid(&idx.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
            let [dz, fz, sz] = model.latent_shape();
            let mut rng = seed::rng(cfg.seed, &[seed::label("vae-noise"), step as u64]);
            let eta = Tensor::randn(&[idx.len(), dz, fz, sz], &mut rng);
            Ok(model.loss_vars(tape, tree, &x, &eta)?.total)
        },
        |tree| {
            let mean = model.encode_stats(tree, &vx)?.mean;
            let out = model.decode(tree, &mean)?;
            let (f, s) = (out.dim(2), out.dim(3));
            let dec = (0..out.dim(0)).map(|i| Ok(out.sample(i).reshape(&[f, s])?)).collect::<Result<Vec<_>>>()?;
            proxy_score(embedder, &dec, &truth)
        },
        sink,
    )
}
