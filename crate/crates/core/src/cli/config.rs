//! Run configuration: a profile (`desk`, `paper` or `custom`) expanded to
//! concrete values, with any field overridable from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anomaly::REFERENCE_LAMBDA;
use crate::dataset::GeometryConfig;
use crate::denoiser::NetConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerPlan;
use crate::schedule::{NoiseSchedule, VarianceKind};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
    /// Starts from the desk values; every field is expected to be set.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub variance: VarianceKind,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_with_variance(self.steps, self.beta_min, self.beta_max, self.variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySection {
    /// In steps of the 1000-step reference schedule.
    pub lambda: usize,
    pub threshold_frac: f64,
    pub binarize_eps: f64,
    /// Pixels; `s / 64` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    pub dark_lesions: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub sampler: SamplerPlan,
    pub geometry: GeometryConfig,
    pub schedule: ScheduleConfig,
    pub net: NetSection,
    pub train: TrainSection,
    pub anomaly: AnomalySection,
    #[serde(default)]
    pub models: ModelPaths,
}

impl RunConfig {
    /// Concrete values for a profile.
    pub fn expand(profile: Profile) -> Self {
        let paper = profile == Profile::Paper;
        let schedule = if paper {
            NoiseSchedule::reference()
        } else {
            NoiseSchedule::linear_matched(200, VarianceKind::Beta).expect("desk schedule")
        };
        let geometry = if paper { GeometryConfig::paper() } else { GeometryConfig::desk() };
        let net = if paper { NetConfig::paper(1) } else { NetConfig::desk(1) };
        let train = if paper { TrainConfig::paper(3) } else { TrainConfig::desk(3) };
        Self {
            profile,
            seed: 0,
            sampler: if paper { SamplerPlan::Ddpm } else { SamplerPlan::Ddim(20) },
            geometry,
            schedule: ScheduleConfig {
                steps: schedule.steps(),
                beta_min: schedule.beta_min(),
                beta_max: schedule.beta_max(),
                variance: schedule.variance(),
            },
            net: NetSection {
                base_channels: net.base_channels,
                channel_multipliers: net.channel_multipliers,
                time_embed_dim: net.time_embed_dim,
            },
            train: TrainSection {
                learning_rate: train.learning_rate,
                batch_size: train.batch_size,
                iterations: train.max_iterations,
                checkpoint_every: if paper { 5000 } else { 0 },
                grad_clip: None,
            },
            anomaly: AnomalySection {
                lambda: REFERENCE_LAMBDA,
                threshold_frac: 0.30,
                binarize_eps: 0.05,
                blur_sigma: None,
                dark_lesions: false,
            },
            models: ModelPaths::default(),
        }
    }

    /// Parses TOML. The `profile` key (default `desk`) selects the base
    /// values; every other key overrides one field.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        let overrides = serde_json::to_value(&table).map_err(|e| Error::Config(e.to_string()))?;
        let profile = match overrides.get("profile") {
            None => Profile::Desk,
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::expand(profile)).expect("config serializes");
        merge(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        self.geometry.validate()?;
        let sched = self.schedule.build()?;
        self.net_config(1).validate()?;
        self.train_config(1)?.validate()?;
        self.sampler.trajectory(sched.steps())?;
        if self.anomaly.lambda >= 1000 {
            return Err(Error::Config(format!(
                "anomaly lambda is in reference steps and must be below 1000, got {}",
                self.anomaly.lambda
            )));
        }
        Ok(())
    }

    pub fn net_config(&self, in_channels: usize) -> NetConfig {
        NetConfig {
            in_channels,
            base_channels: self.net.base_channels,
            channel_multipliers: self.net.channel_multipliers.clone(),
            time_embed_dim: self.net.time_embed_dim,
            patch_side: self.geometry.s,
        }
    }

    pub fn train_config(&self, stage: u8) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_iterations: self.train.iterations,
            seed: self.seed,
            stage,
            init_from: None,
            checkpoint_every: self.train.checkpoint_every,
            grad_clip: self.train.grad_clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
