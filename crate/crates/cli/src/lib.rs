//! Command-line pipeline: synthetic data, training stages, sampling and
//! evaluation, each writing one artifact directory under the run root.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod provenance;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{EvalSplit, ModelKind, ModelSpec, Pipeline};

#[derive(Debug, Parser)]
#[command(name = "eegdiff", version, about = "EEG-conditioned latent diffusion experiments")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    SynthData,
    /// Train the VAE (conv variant) and fit the latent normalization.
    TrainVae,
    /// Pretrain the unconditional denoiser.
    TrainDiffusion,
    /// Train the adapter against the frozen denoiser, or jointly with `--scratch`.
    TrainAdapter {
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        variant: Variant,
    },
    /// Train the direct-regression baseline.
    TrainBaseline {
        #[command(flatten)]
        variant: Variant,
    },
    /// Decode test or OOD chunks with one model.
    Sample {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[command(flatten)]
        variant: Variant,
    },
    /// Metric reports and the comparison table across models.
    Evaluate {
        /// Models to compare; defaults to the four table rows.
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Vec<ModelKind>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "test,ood")]
        splits: Vec<EvalSplit>,
        #[command(flatten)]
        variant: Variant,
    },
    /// Cross-score matrix between decoded and ground-truth tracks.
    Matrix {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[command(flatten)]
        variant: Variant,
    },
    /// Print the resolved config.
    ShowConfig,
}

#[derive(Debug, Clone, Args)]
pub struct Variant {
    /// Train on one subject id, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_subject)]
    pub subject: SubjectSel,
    /// Learn one channel-mixing matrix per subject in front of the projector.
    #[arg(long)]
    pub subject_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectSel(pub Option<usize>);

fn parse_subject(s: &str) -> Result<SubjectSel, String> {
    if s == "all" {
        return Ok(SubjectSel(None));
    }
    s.parse::<usize>().map(|v| SubjectSel(Some(v))).map_err(|_| format!("expected a subject id or `all`, got `{s}`"))
}

impl Variant {
    fn spec(&self, kind: ModelKind) -> ModelSpec {
        // the subject layer only exists on conditioned models
        let layer = self.subject_layer && !matches!(kind, ModelKind::Unconditional | ModelKind::GroundTruth);
        ModelSpec { kind, subject: self.subject.0, subject_layer: layer }
    }
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

/// Runs one subcommand; returns the text to print on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = cli.resolve_config()?;
    if let Command::ShowConfig = cli.command {
        return cfg.to_toml();
    }
    let p = Pipeline::new(cfg)?;
    let done = |what: &str, dir: PathBuf| format!("{what}: {}", dir.display());
    Ok(match &cli.command {
        Command::SynthData => {
            p.synth_data()?;
            done("corpus", p.data_dir())
        }
        Command::TrainVae => {
            p.train_vae()?;
            done("vae", p.vae_dir())
        }
        Command::TrainDiffusion => {
            p.train_diffusion()?;
            done("denoiser", p.diffusion_dir())
        }
        Command::TrainAdapter { scratch, variant } => {
            let spec = variant.spec(if *scratch { ModelKind::ScratchJoint } else { ModelKind::AdapterFrozen });
            p.train_adapter(&spec)?;
            done("adapter", p.model_dir(&spec))
        }
        Command::TrainBaseline { variant } => {
            let spec = variant.spec(ModelKind::BaselineRegressor);
            p.train_baseline(&spec)?;
            done("baseline", p.model_dir(&spec))
        }
        Command::Sample { model, split, variant } => {
            let spec = variant.spec(*model);
            p.sample(&spec, *split)?;
            done("samples", p.samples_dir(&spec, *split))
        }
        Command::Evaluate { models, splits, variant } => {
            let kinds = if models.is_empty() { ModelKind::TABLE.to_vec() } else { models.clone() };
            let specs: Vec<ModelSpec> = kinds.into_iter().map(|k| variant.spec(k)).collect();
            if splits.is_empty() {
                return Err(CliError::Config("no evaluation split selected".into()));
            }
            let rows = p.evaluate(&specs, splits)?;
            format!("{}\n{}", pipeline::comparison_text(&rows, splits).trim_end(), done("reports", p.eval_dir()))
        }
        Command::Matrix { model, split, variant } => {
            let spec = variant.spec(*model);
            let m = p.matrix(&spec, *split)?;
            format!(
                "{} of {} rows peak on the diagonal\n{}",
                m.diagonal_rows,
                m.tracks.len(),
                done("matrix", p.matrix_dir().join(format!("{}-{}", spec.name(), split.name())))
            )
        }
        Command::ShowConfig => unreachable!("handled above"),
    })
}
