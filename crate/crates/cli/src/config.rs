use std::path::{Path, PathBuf};

use eegdiff::controlnet::ProjectorConfig;
use eegdiff::datakit::SynthConfig;
use eegdiff::denoiser::UNetConfig;
use eegdiff::diffusion::ScheduleConfig;
use eegdiff::evalkit::MetricConfig;
use eegdiff::latentvae::VaeConfig;
use eegdiff::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub chunk_seconds: f64,
    /// Train / validation / test fractions of every recording.
    pub split: [f64; 3],
    /// Tracks held out entirely and reported as the OOD column.
    pub ood_tracks: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), chunk_seconds: 3.5, split: [0.8, 0.1, 0.1], ood_tracks: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// DDIM steps for `sample` and `evaluate`.
    pub steps: usize,
    /// ẑ₀ clip limit. TOML has no null, so use `inf` to sample without clipping.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, clip: Some(4.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Only used by the conv VAE variant.
    pub vae: TrainConfig,
    pub diffusion: TrainConfig,
    /// Shared by the frozen adapter and scratch-joint runs.
    pub adapter: TrainConfig,
    pub baseline: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let base = TrainConfig { sampler_clip: Some(4.0), ema_decay: Some(0.999), ..TrainConfig::default() };
        Self {
            vae: TrainConfig { mode: TrainMode::Vae, learning_rate: 1e-3, ema_decay: None, ..base.clone() },
            diffusion: TrainConfig {
                mode: TrainMode::Diffusion,
                steps: 8000,
                learning_rate: 2e-3,
                validation_interval: 2000,
                ..base.clone()
            },
            adapter: TrainConfig { mode: TrainMode::Adapter, batch_size: 16, learning_rate: 1e-3, ..base.clone() },
            baseline: TrainConfig { mode: TrainMode::Regressor, batch_size: 16, learning_rate: 1e-3, ..base },
        }
    }
}

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own seeds from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub projector: ProjectorConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::desk(),
            vae: VaeConfig::default(),
            unet: UNetConfig::default(),
            projector: ProjectorConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Cross-module checks that no single module config can see.
    pub fn check(&self) -> CliResult<()> {
        self.data.synth.validate()?;
        self.schedule.build()?;
        self.unet.validate()?;
        for t in [&self.training.vae, &self.training.diffusion, &self.training.adapter, &self.training.baseline] {
            t.validate()?;
        }
        let s = self.data.split;
        if s.iter().any(|r| *r <= 0.0) || ((s[0] + s[1] + s[2]) - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("split ratios {s:?} must be positive and sum to 1")));
        }
        if let Some(t) = self.data.ood_tracks.iter().find(|&&t| t >= self.data.synth.tracks) {
            return Err(CliError::Config(format!("OOD track {t} does not exist")));
        }
        if self.data.ood_tracks.len() >= self.data.synth.tracks {
            return Err(CliError::Config("every track is held out".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return Err(CliError::Config(format!("sampler steps must be in [1, {}]", self.schedule.steps)));
        }
        let vae = &self.vae;
        if vae.freq_bins != self.data.synth.freq_bins || vae.freq_bins != self.metrics.embedder.freq_bins {
            return Err(CliError::Config("VAE, embedder and corpus disagree on frequency bins".into()));
        }
        if vae.latent_channels != self.unet.in_channels {
            return Err(CliError::Config("U-Net input channels must equal the VAE latent channels".into()));
        }
        if (self.metrics.frames_per_second - self.data.synth.frames_per_second).abs() > 1e-12 {
            return Err(CliError::Config("metric frame rate differs from the corpus frame rate".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[training.adapter]\nsteps = 100\nvalidation_interval = 50\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.adapter.steps, 100);
        assert_eq!(cfg.training.adapter.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.unet, UNetConfig::default());
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let bad = [
            "[data]\nsplit = [0.5, 0.1, 0.1]\n",
            "[data]\nood_tracks = [8]\n",
            "[sampler]\nsteps = 500\n",
            "[unet]\nin_channels = 3\n",
            "[training.diffusion]\nlearning_rate = 0.0\n",
            "unknown_key = [",
        ];
        for b in bad {
            assert!(matches!(ExperimentConfig::from_toml(b), Err(CliError::Config(_))), "{b}");
        }
    }
}
