//! Experiment configuration, read from TOML. Every section is optional and
//! falls back to the defaults below.
//!
//! ```toml
//! format_version = 1
//!
//! [dataset]
//! kind = "gaussian_mixture"   # or "two_moons"
//! n = 4000
//! components = 4
//! seed = 100                  # training seed s uses seed + s
//! held_out_n = 2000
//! held_out_seed = 999
//!
//! [schedule]                  # num_steps, beta_min, beta_max, kind
//! [train]                     # large-model training
//! steps = 8000
//! lr_schedule = "cosine"
//! [build]                     # a, b, [build.probe], [build.distill]
//! [sampler]                   # evaluation sampler
//! kind = "dpm2m"
//! guidance_scale = 1.0
//!
//! [sweep]
//! k = [0, 12, 25]
//! training_seeds = [0, 1, 2, 3, 4]
//! sampling_seeds = 20         # seeds 0..20
//! rows_per_seed = 200
//!
//! [metrics]
//! projections = 64
//! projection_seed = 0
//!
//! [channel]                   # bandwidth_bps, latency_s
//!
//! [checkpoints]               # optional; used instead of training
//! large = "large.ckpt"
//! small = "small.ckpt"
//! ```

use std::path::{Path, PathBuf};

use hybridsd::data::DatasetKind;
use hybridsd::nn::{ArchitectureDescriptor, DistillConfig, LrSchedule, TrainConfig};
use hybridsd::pruning::BuildConfig;
use hybridsd::sampler::{SamplerConfig, SamplerKind};
use hybridsd::schedule::ScheduleConfig;
use hybridsd_edgecloud::ChannelModel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub components: usize,
    pub seed: u64,
    pub held_out_n: usize,
    pub held_out_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            n: 4000,
            components: 4,
            seed: 100,
            held_out_n: 2000,
            held_out_seed: 999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k: Vec<usize>,
    pub training_seeds: Vec<u64>,
    pub sampling_seeds: u64,
    pub rows_per_seed: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k: vec![0, 6, 12, 18, 25],
            training_seeds: vec![0],
            sampling_seeds: 20,
            rows_per_seed: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub projections: usize,
    pub projection_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            projections: 64,
            projection_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub large: Option<PathBuf>,
    pub small: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    /// Large-model architecture; defaults to the standard large denoiser
    /// for the dataset.
    pub model: Option<ArchitectureDescriptor>,
    pub train: TrainConfig,
    pub build: BuildConfig,
    pub sampler: SamplerConfig,
    pub sweep: SweepConfig,
    pub metrics: MetricsConfig,
    pub channel: ChannelModel,
    pub checkpoints: CheckpointConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            model: None,
            train: TrainConfig {
                steps: 8000,
                lr_schedule: LrSchedule::Cosine,
                log_every: 0,
                ..Default::default()
            },
            build: BuildConfig {
                distill: DistillConfig {
                    steps: 500,
                    lr_schedule: LrSchedule::Cosine,
                    log_every: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
            sampler: SamplerConfig {
                kind: SamplerKind::Dpm2m,
                num_inference_steps: 25,
                guidance_scale: 1.0,
                eta: 0.0,
            },
            sweep: SweepConfig::default(),
            metrics: MetricsConfig::default(),
            channel: ChannelModel::mbps(18.88),
            checkpoints: CheckpointConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(Error::FormatVersion {
                what: "config",
                found: cfg.format_version,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn descriptor(&self) -> ArchitectureDescriptor {
        self.model.clone().unwrap_or_else(|| {
            ArchitectureDescriptor::large(2, self.dataset.components, self.schedule.num_steps)
        })
    }

    /// Checks everything that can be checked without touching the disk
    /// beyond the referenced checkpoints.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sweep.k.is_empty() {
            return fail("k sweep is empty".into());
        }
        let steps = self.sampler.num_inference_steps;
        if let Some(k) = self.sweep.k.iter().find(|&&k| k > steps) {
            return fail(format!("k = {k} exceeds {steps} inference steps"));
        }
        if self.sweep.training_seeds.is_empty() {
            return fail("no training seeds".into());
        }
        if self.sweep.sampling_seeds == 0 || self.sweep.rows_per_seed == 0 {
            return fail("need at least one sampling seed and one row".into());
        }
        if self.metrics.projections == 0 {
            return fail("need at least one projection".into());
        }
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        self.channel.validate()?;
        let desc = self.descriptor();
        desc.validate()?;
        if desc.num_classes != self.dataset.components || desc.num_train_steps != self.schedule.num_steps {
            return fail("model classes / steps disagree with dataset / schedule".into());
        }
        let ckpt = &self.checkpoints;
        if (ckpt.large.is_some() || ckpt.small.is_some()) && self.sweep.training_seeds.len() != 1 {
            return fail("checkpoints can only stand in for a single training seed".into());
        }
        if ckpt.small.is_some() && ckpt.large.is_none() {
            return fail("a small checkpoint needs its large model".into());
        }
        for p in [&ckpt.large, &ckpt.small].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::MissingCheckpoint(p.clone()));
            }
        }
        Ok(())
    }
}
