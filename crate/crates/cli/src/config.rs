use std::fs;
use std::path::{Path, PathBuf};

use lfod_core::diffusion::{NoiseExponent, ScheduleParams, StridePolicy};
use lfod_core::lfdn::LfdnConfig;
use lfod_core::scoring::Head;
use lfod_core::trainer::{TimestepSampling, TrainConfig};
use serde::Deserialize;

use crate::failure::Failure;

/// Everything a TOML run file may set. Command-line flags win over it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: Option<usize>,
    pub num_blocks: Option<usize>,
    pub groupnorm_groups: Option<usize>,
    pub time_embed_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: Option<usize>,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub timesteps: Option<TimestepSampling>,
    pub normalization_delta: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub head: Option<String>,
    pub t: Option<usize>,
    pub eta: Option<f64>,
    pub stride: Option<String>,
    pub noise_exponent: Option<NoiseExponent>,
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub features: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub ckpt_initial: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Relative paths inside the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.features,
            &mut cfg.paths.ckpt,
            &mut cfg.paths.ckpt_initial,
            &mut cfg.paths.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, Failure> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn model_config(&self, input_dim: usize) -> LfdnConfig {
        let d = LfdnConfig::new(input_dim);
        LfdnConfig {
            input_dim,
            hidden_dim: self.model.hidden_dim.unwrap_or(d.hidden_dim),
            num_blocks: self.model.num_blocks.unwrap_or(d.num_blocks),
            groupnorm_groups: self.model.groupnorm_groups.unwrap_or(d.groupnorm_groups),
            time_embed_dim: self.model.time_embed_dim.unwrap_or(d.time_embed_dim),
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        let d = ScheduleParams::default();
        ScheduleParams {
            steps: self.schedule.steps.unwrap_or(d.steps),
            beta_min: self.schedule.beta_min.unwrap_or(d.beta_min),
            beta_max: self.schedule.beta_max.unwrap_or(d.beta_max),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            seed,
            timesteps: t.timesteps.unwrap_or(d.timesteps),
            normalization_delta: t.normalization_delta.unwrap_or(d.normalization_delta),
        }
    }
}

/// `mse`, `lr`, `mfsim` or `all`.
pub fn parse_heads(s: &str) -> Result<Vec<Head>, Failure> {
    if s == "all" {
        return Ok(Head::ALL.to_vec());
    }
    s.split(',')
        .map(|h| h.trim().parse::<Head>().map_err(Failure::from))
        .collect()
}

pub fn parse_stride(s: &str) -> Result<StridePolicy, Failure> {
    s.parse().map_err(Failure::from)
}

pub fn parse_exponent(s: &str) -> Result<NoiseExponent, Failure> {
    match s {
        "variance" => Ok(NoiseExponent::Variance),
        "stddev" => Ok(NoiseExponent::StdDev),
        _ => Err(Failure::config(format!(
            "unknown noise exponent `{s}`, expected variance or stddev"
        ))),
    }
}
