//! Stages of an experiment run. Each stage reads its upstream artifact
//! directories, checks their provenance against the current config, and
//! writes one directory of its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eegdiff::controlnet::{AdapterConfig, ControlNet};
use eegdiff::datakit::{chunk_lengths, split_dataset, synth_generate, DatasetManifest, DatasetSplit, PairedExample, SynthCorpus};
use eegdiff::denoiser::UNet;
use eegdiff::diffusion::NoiseSchedule;
use eegdiff::evalkit::{
    clap_score, cross_score_matrix, diagonal_argmax_rows, matrix_csv, matrix_pgm, GlobalEmbedder, MetricReport, MetricSuite,
    PairKey,
};
use eegdiff::latentvae::{ConvVae, LatentNorm, Vae, VaeVariant};
use eegdiff::seed;
use eegdiff::trainer::{
    decode_latents, fit_latent_norm, joint_tree, sample_adapter, sample_unconditional, split_tree, train_adapter,
    train_diffusion, train_regressor, train_vae, CheckpointSink, LatentContext, LatentSet, Regressor, TrainConfig,
    TrainMode, TrainOutcome,
};
use ndcore::{Container, ParameterTree, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::provenance::{stage_key, verify_stage, Provenance, StageWriter};

pub const CORPUS_FILE: &str = "corpus.ndtc";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.ndtc";
pub const NORM_FILE: &str = "latent_norm.json";
pub const DECODED_FILE: &str = "decoded.ndtc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Projector-shaped conv net regressing the latent from y.
    BaselineRegressor,
    /// Pretrained denoiser without conditioning.
    Unconditional,
    /// Adapter trained against the frozen pretrained denoiser.
    AdapterFrozen,
    /// Adapter and denoiser trained jointly from initialization.
    ScratchJoint,
    /// Ground-truth spectrograms passed through unchanged (metric sanity check).
    GroundTruth,
}

impl ModelKind {
    pub const TABLE: [ModelKind; 4] =
        [ModelKind::BaselineRegressor, ModelKind::Unconditional, ModelKind::AdapterFrozen, ModelKind::ScratchJoint];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BaselineRegressor => "baseline-regressor",
            ModelKind::Unconditional => "unconditional",
            ModelKind::AdapterFrozen => "adapter-frozen",
            ModelKind::ScratchJoint => "scratch-joint",
            ModelKind::GroundTruth => "ground-truth",
        }
    }

    fn conditioned(self) -> bool {
        matches!(self, ModelKind::BaselineRegressor | ModelKind::AdapterFrozen | ModelKind::ScratchJoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Test,
    Ood,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Test => "test",
            EvalSplit::Ood => "ood",
        }
    }
}

/// One model variant: kind, training subjects, subject layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `None` trains on all subjects; `Some(s)` on subject `s` only.
    pub subject: Option<usize>,
    pub subject_layer: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self { kind, subject: None, subject_layer: false }
    }

    /// Directory and report name, e.g. `adapter-frozen-all-sl`.
    pub fn name(&self) -> String {
        match self.kind {
            ModelKind::Unconditional | ModelKind::GroundTruth => match self.subject {
                Some(s) => format!("{}-s{s}", self.kind.name()),
                None => self.kind.name().to_string(),
            },
            k => {
                let who = self.subject.map_or_else(|| "all".to_string(), |s| format!("s{s}"));
                let sl = if self.subject_layer { "-sl" } else { "" };
                format!("{}-{who}{sl}", k.name())
            }
        }
    }

    fn check(&self, cfg: &ExperimentConfig) -> CliResult<()> {
        if let Some(s) = self.subject {
            if s >= cfg.data.synth.subjects {
                return Err(CliError::Config(format!("subject {s} does not exist")));
            }
        }
        if self.subject_layer && !self.kind.conditioned() {
            return Err(CliError::Config(format!("{} has no subject layer", self.kind.name())));
        }
        if self.subject_layer && self.subject.is_some() {
            return Err(CliError::Config("the subject layer needs training on all subjects".into()));
        }
        Ok(())
    }
}

/// Decoded chunks of one model on one split, with their pair keys.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub keys: Vec<PairKey>,
    pub spectrograms: Vec<Tensor<f32>>,
}

/// A row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub split: String,
    pub pairs: usize,
    pub fad_global: f64,
    pub fad_frame: f64,
    pub clap_score: f64,
    pub clap_p: f64,
    pub pearson_frame: f64,
    pub pearson_p: f64,
    pub mse_frame: f64,
    pub mse_p: f64,
}

impl ComparisonRow {
    fn new(model: String, split: EvalSplit, r: &MetricReport) -> Self {
        let a = &r.aggregates;
        Self {
            model,
            split: split.name().into(),
            pairs: r.pairs.len(),
            fad_global: a.fad_global,
            fad_frame: a.fad_frame,
            clap_score: a.clap_score,
            clap_p: r.p_clap.p_value,
            pearson_frame: a.pearson_frame,
            pearson_p: r.p_pearson.p_value,
            mse_frame: a.mse_frame,
            mse_p: r.p_mse.p_value,
        }
    }
}

/// Cross-score matrix over tracks plus its diagonal count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub model: String,
    pub split: String,
    pub tracks: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    pub diagonal_rows: usize,
}

/// Dataset, VAE and embedder state shared by every stage after `synth-data`.
pub struct Prepared {
    pub split: DatasetSplit,
    pub vae: Vae,
    pub norm: LatentNorm,
    pub schedule: NoiseSchedule,
    pub embedder: GlobalEmbedder,
    pub eeg_len: usize,
    data_prov: Provenance,
    vae_prov: Provenance,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    root: PathBuf,
}

fn stage_seed(master: u64, stage: &str, sub: u64) -> u64 {
    seed::derive(master, &[seed::label(stage), sub])
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.check()?;
        let root = cfg.output_dir.clone();
        Ok(Self { cfg, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vae_dir(&self) -> PathBuf {
        self.root.join("vae")
    }

    pub fn diffusion_dir(&self) -> PathBuf {
        self.root.join("diffusion")
    }

    pub fn model_dir(&self, spec: &ModelSpec) -> PathBuf {
        self.root.join("models").join(spec.name())
    }

    pub fn samples_dir(&self, spec: &ModelSpec, split: EvalSplit) -> PathBuf {
        self.root.join("samples").join(format!("{}-{}", spec.name(), split.name()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn matrix_dir(&self) -> PathBuf {
        self.root.join("matrix")
    }

    // ---- keys ----

    pub fn data_key(&self) -> CliResult<String> {
        stage_key("synth-data", &(self.cfg.seed, &self.cfg.data), &[])
    }

    pub fn vae_key(&self) -> CliResult<String> {
        let c = &self.cfg;
        let train = (c.vae.variant == VaeVariant::Conv).then_some(&c.training.vae);
        stage_key("train-vae", &(&c.vae, train, &c.metrics.embedder), &[&self.data_key()?])
    }

    pub fn diffusion_key(&self) -> CliResult<String> {
        let c = &self.cfg;
        stage_key("train-diffusion", &(&c.schedule, &c.unet, &c.training.diffusion), &[&self.vae_key()?])
    }

    pub fn model_key(&self, spec: &ModelSpec) -> CliResult<String> {
        let c = &self.cfg;
        match spec.kind {
            ModelKind::Unconditional => self.diffusion_key(),
            ModelKind::GroundTruth => self.data_key(),
            ModelKind::AdapterFrozen => {
                stage_key("train-adapter", &(spec, &c.projector, &c.training.adapter), &[&self.diffusion_key()?])
            }
            ModelKind::ScratchJoint => {
                let slice = (spec, &c.projector, &c.schedule, &c.unet, &c.training.adapter);
                stage_key("train-adapter", &slice, &[&self.vae_key()?])
            }
            ModelKind::BaselineRegressor => {
                stage_key("train-baseline", &(spec, &c.projector, &c.training.baseline), &[&self.vae_key()?])
            }
        }
    }

    pub fn samples_key(&self, spec: &ModelSpec, split: EvalSplit) -> CliResult<String> {
        stage_key("sample", &(spec, split, &self.cfg.sampler, &self.cfg.schedule), &[&self.model_key(spec)?])
    }

    // ---- stages ----

    /// Generates the corpus and writes it with its manifest.
    pub fn synth_data(&self) -> CliResult<Provenance> {
        let c = &self.cfg;
        let corpus = synth_generate(&c.data.synth, stage_seed(c.seed, "synth", 0))?;
        let pre = c.data.synth.preprocess_config();
        let examples = corpus.examples(&pre, c.data.chunk_seconds)?;
        let split = split_dataset(&examples, c.data.split, &c.data.ood_tracks)?;
        let manifest = DatasetManifest::new(&corpus, &pre, c.data.chunk_seconds, c.data.split, &c.data.ood_tracks, &split);
        let mut w = StageWriter::create(&self.data_dir(), "synth-data", self.data_key()?, corpus.seed)?;
        w.write(CORPUS_FILE, &corpus.to_container()?.to_bytes())?;
        w.write(MANIFEST_FILE, manifest.to_text()?.as_bytes())?;
        w.finish(c)
    }

    fn load_split(&self) -> CliResult<(DatasetSplit, Provenance)> {
        let prov = verify_stage(&self.data_dir(), "synth-data", &self.data_key()?, "synth-data")?;
        let corpus = SynthCorpus::read(&self.data_dir().join(CORPUS_FILE))?;
        let c = &self.cfg;
        let examples = corpus.examples(&c.data.synth.preprocess_config(), c.data.chunk_seconds)?;
        Ok((split_dataset(&examples, c.data.split, &c.data.ood_tracks)?, prov))
    }

    fn fit_embedder(&self, split: &DatasetSplit) -> CliResult<GlobalEmbedder> {
        let xs: Vec<Tensor<f32>> = split.train.iter().map(|e| e.x.clone()).collect();
        Ok(GlobalEmbedder::fit(&self.cfg.metrics.embedder, &xs)?)
    }

    /// Trains the conv VAE (the analytic one has nothing to train) and fits
    /// the latent normalization on the training split.
    pub fn train_vae(&self) -> CliResult<Provenance> {
        let c = &self.cfg;
        let (split, data_prov) = self.load_split()?;
        let vae_seed = stage_seed(c.seed, "vae", c.training.vae.seed);
        let mut w = StageWriter::create(&self.vae_dir(), "train-vae", self.vae_key()?, vae_seed)?;
        w.inputs_from("data", &data_prov);
        let vae = match c.vae.variant {
            VaeVariant::Analytic => Vae::new(c.vae.clone(), vae_seed)?,
            VaeVariant::Conv => {
                let model = ConvVae::new(c.vae.clone())?;
                let tcfg = TrainConfig { mode: TrainMode::Vae, seed: vae_seed, ..c.training.vae.clone() };
                let xs: Vec<Tensor<f32>> = split.train.iter().map(|e| e.x.clone()).collect();
                let vx: Vec<Tensor<f32>> = split.validation.iter().map(|e| e.x.clone()).collect();
                let embedder = self.fit_embedder(&split)?;
                let out = train_vae(&tcfg, &model, model.init(vae_seed)?, &xs, &vx, &embedder, &CheckpointSink::default())
                    .map_err(training_error)?;
                write_log(&mut w, &out, "train")?;
                w.write(PARAMS_FILE, &out.best.to_container(serde_json::json!({ "stage": "train-vae" })).to_bytes())?;
                Vae::Conv { model, params: out.best }
            }
        };
        let norm = fit_latent_norm(&split.train, &vae)?;
        w.write(NORM_FILE, serde_json::to_string_pretty(&norm)?.as_bytes())?;
        w.finish(c)
    }

    /// Loads everything the latent-space stages share.
    pub fn prepare(&self) -> CliResult<Prepared> {
        let c = &self.cfg;
        let (split, data_prov) = self.load_split()?;
        let vae_prov = verify_stage(&self.vae_dir(), "train-vae", &self.vae_key()?, "train-vae")?;
        let vae = match c.vae.variant {
            VaeVariant::Analytic => Vae::new(c.vae.clone(), 0)?,
            VaeVariant::Conv => {
                let (params, _) = ParameterTree::load(self.vae_dir().join(PARAMS_FILE))?;
                Vae::Conv { model: ConvVae::new(c.vae.clone())?, params }
            }
        };
        let norm: LatentNorm = serde_json::from_slice(&std::fs::read(self.vae_dir().join(NORM_FILE))?)?;
        let embedder = self.fit_embedder(&split)?;
        let (eeg_len, _) = chunk_lengths(c.data.chunk_seconds, c.data.synth.eeg_rate, c.data.synth.frames_per_second)?;
        Ok(Prepared { split, vae, norm, schedule: c.schedule.build()?, embedder, eeg_len, data_prov, vae_prov })
    }

    fn latent_sets(&self, p: &Prepared, subject: Option<usize>) -> CliResult<(LatentSet, LatentSet)> {
        let split = match subject {
            Some(s) => p.split.for_subject(s),
            None => p.split.clone(),
        };
        if split.train.is_empty() || split.validation.is_empty() {
            return Err(CliError::Data("empty training or validation split".into()));
        }
        Ok((LatentSet::build(&split.train, &p.vae, &p.norm)?, LatentSet::build(&split.validation, &p.vae, &p.norm)?))
    }

    fn unet(&self) -> CliResult<UNet> {
        Ok(UNet::new(self.cfg.unet.clone())?)
    }

    fn controlnet(&self, p: &Prepared, spec: &ModelSpec) -> CliResult<ControlNet> {
        let subjects = spec.subject_layer.then_some(self.cfg.data.synth.subjects);
        let acfg = AdapterConfig { projector: self.cfg.projector.clone(), subject_count: subjects };
        Ok(ControlNet::new(&self.unet()?, &acfg, self.cfg.data.synth.eeg_channels, p.eeg_len, p.vae.latent_shape())?)
    }

    fn regressor(&self, p: &Prepared, spec: &ModelSpec) -> CliResult<Regressor> {
        let subjects = spec.subject_layer.then_some(self.cfg.data.synth.subjects);
        Ok(Regressor::new(&self.cfg.projector, subjects, self.cfg.data.synth.eeg_channels, p.eeg_len, p.vae.latent_shape())?)
    }

    fn provenance_inputs(w: &mut StageWriter, p: &Prepared) {
        w.inputs_from("data", &p.data_prov);
        w.inputs_from("vae", &p.vae_prov);
    }

    /// Unconditional pretraining of the denoiser θ on all subjects.
    pub fn train_diffusion(&self) -> CliResult<Provenance> {
        let c = &self.cfg;
        let p = self.prepare()?;
        let (train, val) = self.latent_sets(&p, None)?;
        let unet = self.unet()?;
        let s = stage_seed(c.seed, "diffusion", c.training.diffusion.seed);
        let tcfg = TrainConfig { mode: TrainMode::Diffusion, seed: s, ..c.training.diffusion.clone() };
        let mut w = StageWriter::create(&self.diffusion_dir(), "train-diffusion", self.diffusion_key()?, s)?;
        Self::provenance_inputs(&mut w, &p);
        let ctx = LatentContext { vae: &p.vae, norm: &p.norm, schedule: &p.schedule, embedder: &p.embedder };
        let theta = unet.init(stage_seed(c.seed, "unet-init", 0))?;
        let out = train_diffusion(&tcfg, &unet, theta, &train, &val, &ctx, &CheckpointSink::default()).map_err(training_error)?;
        write_log(&mut w, &out, "train")?;
        w.write(PARAMS_FILE, &out.best.to_container(serde_json::json!({ "stage": "train-diffusion" })).to_bytes())?;
        w.finish(c)
    }

    fn load_theta(&self) -> CliResult<(ParameterTree<f32>, Provenance)> {
        let prov = verify_stage(&self.diffusion_dir(), "train-diffusion", &self.diffusion_key()?, "train-diffusion")?;
        let (theta, _) = ParameterTree::load(self.diffusion_dir().join(PARAMS_FILE))?;
        Ok((theta, prov))
    }

    /// Frozen-θ adapter (`scratch = false`) or joint training from scratch.
    pub fn train_adapter(&self, spec: &ModelSpec) -> CliResult<Provenance> {
        let c = &self.cfg;
        spec.check(c)?;
        let (scratch, mode) = match spec.kind {
            ModelKind::AdapterFrozen => (false, TrainMode::Adapter),
            ModelKind::ScratchJoint => (true, TrainMode::ScratchJoint),
            k => return Err(CliError::Config(format!("{} is not an adapter model", k.name()))),
        };
        let p = self.prepare()?;
        let (train, val) = self.latent_sets(&p, spec.subject)?;
        let cn = self.controlnet(&p, spec)?;
        let s = stage_seed(c.seed, &spec.name(), c.training.adapter.seed);
        let tcfg = TrainConfig { mode, seed: s, subject_layer: spec.subject_layer, ..c.training.adapter.clone() };
        // upstream checks come first so a failed run leaves the old record intact
        let (theta, theta_prov) = if scratch {
            (self.unet()?.init(stage_seed(c.seed, "scratch-init", 0))?, None)
        } else {
            let (theta, prov) = self.load_theta()?;
            (theta, Some(prov))
        };
        let mut w = StageWriter::create(&self.model_dir(spec), "train-adapter", self.model_key(spec)?, s)?;
        Self::provenance_inputs(&mut w, &p);
        if let Some(prov) = &theta_prov {
            w.inputs_from("diffusion", prov);
        }
        let phi = cn.init_from(&theta, stage_seed(c.seed, "adapter-init", 0))?;
        let ctx = LatentContext { vae: &p.vae, norm: &p.norm, schedule: &p.schedule, embedder: &p.embedder };
        let out = train_adapter(&tcfg, &cn, joint_tree(&theta, &phi, scratch)?, &train, &val, &ctx, &CheckpointSink::default())
            .map_err(training_error)?;
        if !scratch {
            let (after, _) = split_tree(&out.best);
            if after.canonical_bytes() != theta.canonical_bytes() {
                return Err(CliError::Training("frozen denoiser parameters changed during adapter training".into()));
            }
        }
        write_log(&mut w, &out, "train")?;
        w.write(PARAMS_FILE, &out.best.to_container(serde_json::json!({ "stage": spec.name() })).to_bytes())?;
        w.finish(c)
    }

    /// The direct-regression baseline.
    pub fn train_baseline(&self, spec: &ModelSpec) -> CliResult<Provenance> {
        let c = &self.cfg;
        spec.check(c)?;
        if spec.kind != ModelKind::BaselineRegressor {
            return Err(CliError::Config(format!("{} is not the baseline", spec.kind.name())));
        }
        let p = self.prepare()?;
        let (train, val) = self.latent_sets(&p, spec.subject)?;
        let reg = self.regressor(&p, spec)?;
        let s = stage_seed(c.seed, &spec.name(), c.training.baseline.seed);
        let tcfg = TrainConfig { mode: TrainMode::Regressor, seed: s, subject_layer: spec.subject_layer, ..c.training.baseline.clone() };
        let mut w = StageWriter::create(&self.model_dir(spec), "train-baseline", self.model_key(spec)?, s)?;
        Self::provenance_inputs(&mut w, &p);
        let ctx = LatentContext { vae: &p.vae, norm: &p.norm, schedule: &p.schedule, embedder: &p.embedder };
        let out = train_regressor(&tcfg, &reg, reg.init(stage_seed(c.seed, "baseline-init", 0))?, &train, &val, &ctx, &CheckpointSink::default())
            .map_err(training_error)?;
        write_log(&mut w, &out, "train")?;
        w.write(PARAMS_FILE, &out.best.to_container(serde_json::json!({ "stage": spec.name() })).to_bytes())?;
        w.finish(c)
    }

    fn eval_examples<'a>(&self, p: &'a Prepared, spec: &ModelSpec, split: EvalSplit) -> CliResult<Vec<&'a PairedExample>> {
        let all = match split {
            EvalSplit::Test => &p.split.test,
            EvalSplit::Ood => &p.split.ood,
        };
        let ex: Vec<&PairedExample> = all.iter().filter(|e| spec.subject.is_none_or(|s| e.subject == s)).collect();
        if ex.is_empty() {
            return Err(CliError::Data(format!("no {} chunks for {}", split.name(), spec.name())));
        }
        Ok(ex)
    }

    /// Decodes every chunk of `split` with the model and stores the result.
    pub fn sample(&self, spec: &ModelSpec, split: EvalSplit) -> CliResult<Provenance> {
        let c = &self.cfg;
        spec.check(c)?;
        let p = self.prepare()?;
        let examples = self.eval_examples(&p, spec, split)?;
        let owned: Vec<PairedExample> = examples.iter().map(|e| (*e).clone()).collect();
        let set = LatentSet::build(&owned, &p.vae, &p.norm)?;
        let s = stage_seed(c.seed, &format!("sample-{}-{}", spec.name(), split.name()), 0);
        let model_input = || -> CliResult<(ParameterTree<f32>, Provenance)> {
            let dir = self.model_dir(spec);
            let stage = if spec.kind == ModelKind::BaselineRegressor { "train-baseline" } else { "train-adapter" };
            let prov = verify_stage(&dir, stage, &self.model_key(spec)?, stage)?;
            Ok((ParameterTree::load(dir.join(PARAMS_FILE))?.0, prov))
        };
        let (params, upstream) = match spec.kind {
            ModelKind::GroundTruth => (None, None),
            ModelKind::Unconditional => {
                let (theta, prov) = self.load_theta()?;
                (Some(theta), Some(("diffusion".to_string(), prov)))
            }
            _ => {
                let (params, prov) = model_input()?;
                (Some(params), Some((format!("models/{}", spec.name()), prov)))
            }
        };
        let mut w = StageWriter::create(&self.samples_dir(spec, split), "sample", self.samples_key(spec, split)?, s)?;
        Self::provenance_inputs(&mut w, &p);
        if let Some((label, prov)) = &upstream {
            w.inputs_from(label, prov);
        }
        let (steps, clip) = (c.sampler.steps, c.sampler.clip);
        let decoded: Vec<Tensor<f32>> = match (spec.kind, &params) {
            (ModelKind::Unconditional, Some(theta)) => {
                let z = sample_unconditional(&self.unet()?, theta, set.len(), p.vae.latent_shape(), &p.schedule, steps, clip, s)?;
                decode_latents(&p.vae, &p.norm, &z)?
            }
            (ModelKind::AdapterFrozen | ModelKind::ScratchJoint, Some(params)) => {
                let cn = self.controlnet(&p, spec)?;
                let z = sample_adapter(&cn, params, &set.y, &set.subjects, &p.schedule, steps, clip, s)?;
                decode_latents(&p.vae, &p.norm, &z)?
            }
            (ModelKind::BaselineRegressor, Some(params)) => {
                let z = self.regressor(&p, spec)?.predict(params, &set.y, &set.subjects)?;
                decode_latents(&p.vae, &p.norm, &z)?
            }
            _ => set.x.clone(),
        };
        let keys: Vec<PairKey> = examples.iter().map(|e| PairKey { track: e.track, subject: e.subject, chunk: e.chunk }).collect();
        let mut container = Container::new(serde_json::json!({ "model": spec.name(), "split": split.name(), "keys": keys }));
        for (i, d) in decoded.into_iter().enumerate() {
            container.push(format!("decoded/{i:05}"), d);
        }
        w.write(DECODED_FILE, &container.to_bytes())?;
        w.finish(c)
    }

    /// Samples of `spec` on `split`, produced first if absent.
    pub fn decoded(&self, spec: &ModelSpec, split: EvalSplit) -> CliResult<Decoded> {
        let dir = self.samples_dir(spec, split);
        let key = self.samples_key(spec, split)?;
        if verify_stage(&dir, "sample", &key, "sample").is_err() {
            self.sample(spec, split)?;
            verify_stage(&dir, "sample", &key, "sample")?;
        }
        let mut c = Container::from_bytes(&std::fs::read(dir.join(DECODED_FILE))?)?;
        let keys: Vec<PairKey> = serde_json::from_value(c.meta["keys"].clone())?;
        let spectrograms = (0..keys.len()).map(|i| c.take(&format!("decoded/{i:05}"))).collect::<ndcore::Result<Vec<_>>>()?;
        Ok(Decoded { keys, spectrograms })
    }

    fn ground_truth(&self, p: &Prepared, spec: &ModelSpec, split: EvalSplit, keys: &[PairKey]) -> CliResult<Vec<Tensor<f32>>> {
        let ex = self.eval_examples(p, spec, split)?;
        if ex.len() != keys.len() || ex.iter().zip(keys).any(|(e, k)| (e.track, e.subject, e.chunk) != (k.track, k.subject, k.chunk)) {
            return Err(CliError::Provenance("decoded chunks do not line up with the current split".into()));
        }
        Ok(ex.iter().map(|e| e.x.clone()).collect())
    }

    /// Metric reports for every (model, split) and the comparison table.
    pub fn evaluate(&self, specs: &[ModelSpec], splits: &[EvalSplit]) -> CliResult<Vec<ComparisonRow>> {
        let c = &self.cfg;
        for s in specs {
            s.check(c)?;
        }
        let p = self.prepare()?;
        let suite = MetricSuite::with_stats(&c.metrics, p.embedder.center().to_vec(), p.embedder.scale().to_vec())?;
        let key = stage_key("evaluate", &(specs, splits, &c.metrics), &self.eval_upstream(specs, splits)?.iter().map(String::as_str).collect::<Vec<_>>())?;
        let mut w = StageWriter::create(&self.eval_dir(), "evaluate", key, c.metrics.seed)?;
        Self::provenance_inputs(&mut w, &p);
        let mut rows = Vec::new();
        for spec in specs {
            for &split in splits {
                let dec = self.decoded(spec, split)?;
                let gt = self.ground_truth(&p, spec, split, &dec.keys)?;
                let stem = format!("{}-{}", spec.name(), split.name());
                let report = suite.report(&stem, &dec.keys, &gt, &dec.spectrograms)?;
                w.input(format!("samples/{stem}/{DECODED_FILE}"), crate::provenance::file_hash(&self.samples_dir(spec, split).join(DECODED_FILE))?);
                report.write(w.dir(), &stem)?;
                for ext in ["pairs.csv", "summary.txt", "json"] {
                    w.adopt(&format!("{stem}.{ext}"))?;
                }
                rows.push(ComparisonRow::new(spec.name(), split, &report));
            }
        }
        w.write("comparison.csv", comparison_csv(&rows)?.as_bytes())?;
        w.write("comparison.txt", comparison_text(&rows, splits).as_bytes())?;
        w.finish(c)?;
        Ok(rows)
    }

    fn eval_upstream(&self, specs: &[ModelSpec], splits: &[EvalSplit]) -> CliResult<Vec<String>> {
        let mut keys = vec![self.vae_key()?];
        for s in specs {
            for &sp in splits {
                keys.push(self.samples_key(s, sp)?);
            }
        }
        Ok(keys)
    }

    /// Decoded-vs-ground-truth global-embedding scores averaged per track pair.
    pub fn matrix(&self, spec: &ModelSpec, split: EvalSplit) -> CliResult<MatrixSummary> {
        let c = &self.cfg;
        spec.check(c)?;
        let p = self.prepare()?;
        let dec = self.decoded(spec, split)?;
        let gt = self.ground_truth(&p, spec, split, &dec.keys)?;
        let summary = track_matrix(&p.embedder, &dec.keys, &dec.spectrograms, &gt, spec.name(), split)?;
        let stem = format!("{}-{}", spec.name(), split.name());
        let key = stage_key("matrix", &(spec, split, &c.metrics.embedder), &[&self.samples_key(spec, split)?])?;
        let mut w = StageWriter::create(&self.matrix_dir().join(&stem), "matrix", key, 0)?;
        Self::provenance_inputs(&mut w, &p);
        w.input(format!("samples/{stem}/{DECODED_FILE}"), crate::provenance::file_hash(&self.samples_dir(spec, split).join(DECODED_FILE))?);
        let labels: Vec<String> = summary.tracks.iter().map(|t| format!("track{t}")).collect();
        w.write("matrix.csv", matrix_csv(&summary.matrix, &labels, &labels)?.as_bytes())?;
        w.write("matrix.pgm", &matrix_pgm(&summary.matrix, 16)?)?;
        w.write("matrix.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
        w.finish(c)?;
        Ok(summary)
    }
}

/// Groups chunks by track (sorted) and averages cross scores.
pub fn track_matrix(
    embedder: &GlobalEmbedder,
    keys: &[PairKey],
    decoded: &[Tensor<f32>],
    gt: &[Tensor<f32>],
    model: String,
    split: EvalSplit,
) -> CliResult<MatrixSummary> {
    let mut tracks: Vec<usize> = keys.iter().map(|k| k.track).collect();
    tracks.sort_unstable();
    tracks.dedup();
    let group = |xs: &[Tensor<f32>]| -> CliResult<Vec<Vec<Vec<f64>>>> {
        tracks
            .iter()
            .map(|t| keys.iter().zip(xs).filter(|(k, _)| k.track == *t).map(|(_, x)| Ok(embedder.embed(x)?)).collect())
            .collect()
    };
    let matrix = cross_score_matrix(&group(decoded)?, &group(gt)?, |a, b| clap_score(a, b))?;
    let diagonal_rows = diagonal_argmax_rows(&matrix);
    Ok(MatrixSummary { model, split: split.name().into(), tracks, matrix, diagonal_rows })
}

fn training_error(e: eegdiff::Error) -> CliError {
    match e {
        eegdiff::Error::Config(m) => CliError::Config(m),
        other => CliError::Training(other.to_string()),
    }
}

fn write_log(w: &mut StageWriter, out: &TrainOutcome, stem: &str) -> CliResult<()> {
    out.log.write(w.dir(), stem)?;
    w.adopt(&format!("{stem}.log.jsonl"))?;
    w.adopt(&format!("{stem}.summary.json"))
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Evaluation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Evaluation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Evaluation(e.to_string()))
}

/// Plain-text table: one block per split, models as rows.
pub fn comparison_text(rows: &[ComparisonRow], splits: &[EvalSplit]) -> String {
    let mut s = String::new();
    for split in splits {
        let _ = writeln!(s, "[{}]", split.name());
        let _ = writeln!(
            s,
            "{:<28} {:>10} {:>10} {:>16} {:>16} {:>16}",
            "model", "FAD-global", "FAD-frame", "CLAP (p)", "Pearson (p)", "MSE (p)"
        );
        for r in rows.iter().filter(|r| r.split == split.name()) {
            let _ = writeln!(
                s,
                "{:<28} {:>10.4} {:>10.4} {:>16} {:>16} {:>16}",
                r.model,
                r.fad_global,
                r.fad_frame,
                format!("{:.4} ({:.4})", r.clap_score, r.clap_p),
                format!("{:.4} ({:.4})", r.pearson_frame, r.pearson_p),
                format!("{:.3} ({:.4})", r.mse_frame, r.mse_p),
            );
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names() {
        let mut s = ModelSpec::new(ModelKind::AdapterFrozen);
        assert_eq!(s.name(), "adapter-frozen-all");
        s.subject_layer = true;
        assert_eq!(s.name(), "adapter-frozen-all-sl");
        let s = ModelSpec { kind: ModelKind::BaselineRegressor, subject: Some(2), subject_layer: false };
        assert_eq!(s.name(), "baseline-regressor-s2");
        assert_eq!(ModelSpec::new(ModelKind::Unconditional).name(), "unconditional");
    }

    #[test]
    fn spec_checks() {
        let cfg = ExperimentConfig::default();
        let bad = [
            ModelSpec { kind: ModelKind::AdapterFrozen, subject: Some(9), subject_layer: false },
            ModelSpec { kind: ModelKind::Unconditional, subject: None, subject_layer: true },
            ModelSpec { kind: ModelKind::AdapterFrozen, subject: Some(0), subject_layer: true },
        ];
        for b in bad {
            assert!(matches!(b.check(&cfg), Err(CliError::Config(_))), "{b:?}");
        }
        assert!(ModelSpec::new(ModelKind::ScratchJoint).check(&cfg).is_ok());
    }

    #[test]
    fn comparison_table_layout() {
        let row = |m: &str, s: &str| ComparisonRow {
            model: m.into(),
            split: s.into(),
            pairs: 3,
            fad_global: 0.1,
            fad_frame: 0.2,
            clap_score: 0.5,
            clap_p: 0.01,
            pearson_frame: 0.3,
            pearson_p: 0.2,
            mse_frame: 1.5,
            mse_p: 0.4,
        };
        let rows = vec![row("a", "test"), row("b", "test"), row("a", "ood")];
        let text = comparison_text(&rows, &[EvalSplit::Test, EvalSplit::Ood]);
        let test_block = text.split("[ood]").next().unwrap();
        assert!(test_block.contains("\na ") && test_block.contains("\nb "));
        assert_eq!(text.matches("0.5000 (0.0100)").count(), 3);
        let csv = comparison_csv(&rows).unwrap();
        assert!(csv.starts_with("model,split,pairs,fad_global,fad_frame,clap_score,clap_p"));
        assert_eq!(csv.lines().count(), 4);
    }
}
