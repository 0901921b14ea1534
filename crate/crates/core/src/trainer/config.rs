//! Run configuration: per-model defaults overridable from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelTag};
use crate::preprocess::PreprocessSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            momentum: 0.9,
            weight_decay,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            momentum,
            ..Self::adam(learning_rate, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must be in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Exponential,
    Multistep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub scheduler: ScheduleKind,
    pub decay_rate: f64,
    /// Epochs at which a multistep schedule decays.
    pub milestones: Vec<usize>,
}

impl ScheduleConfig {
    pub fn exponential(decay_rate: f64) -> Self {
        Self {
            scheduler: ScheduleKind::Exponential,
            decay_rate,
            milestones: Vec::new(),
        }
    }

    pub fn multistep(decay_rate: f64, milestones: Vec<usize>) -> Self {
        Self {
            scheduler: ScheduleKind::Multistep,
            decay_rate,
            milestones,
        }
    }

    /// Default milestones at one half and three quarters of the run.
    pub fn default_milestones(max_epochs: usize) -> Vec<usize> {
        vec![max_epochs / 2, 3 * max_epochs / 4]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay_rate {} must be in (0, 1]", self.decay_rate)));
        }
        Ok(())
    }
}

/// Everything a training run needs. Serialized flat: every field of the
/// nested groups is a top-level key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub model: ModelTag,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub drop_rate: f64,
    #[serde(flatten)]
    pub preprocess: PreprocessSpec,
    pub seed: u64,
    #[serde(flatten)]
    pub arch: ArchConfig,
}

impl TrainRunConfig {
    /// Per-network default settings.
    pub fn defaults(model: ModelTag) -> Self {
        let (optimizer, schedule, batch_size, max_epochs, drop_rate, preprocess) = match model {
            ModelTag::Resnet50 => (
                OptimizerConfig::adam(1e-4, 1e-5),
                ScheduleConfig::exponential(0.96),
                64,
                100,
                0.3,
                PreprocessSpec::imagenet(256, 224),
            ),
            ModelTag::Ran => (
                OptimizerConfig::sgd(0.1, 0.9, 0.0),
                ScheduleConfig::multistep(0.1, ScheduleConfig::default_milestones(100)),
                32,
                100,
                0.0,
                PreprocessSpec::imagenet(256, 224),
            ),
            ModelTag::Fpn => (
                OptimizerConfig::adam(1e-4, 1e-5),
                ScheduleConfig::exponential(0.96),
                32,
                100,
                0.0,
                PreprocessSpec::imagenet(256, 224),
            ),
            ModelTag::Mmal => (
                OptimizerConfig::sgd(1e-3, 0.9, 1e-5),
                ScheduleConfig::multistep(0.1, ScheduleConfig::default_milestones(150)),
                6,
                150,
                0.0,
                PreprocessSpec::imagenet(448, 448),
            ),
        };
        Self {
            model,
            optimizer,
            schedule,
            batch_size,
            max_epochs,
            patience: 10,
            drop_rate,
            preprocess,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.preprocess.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate {} must be in [0, 1)", self.drop_rate)));
        }
        Ok(())
    }

    /// Defaults for `model`, overridden by the keys in `text`. The `model`
    /// key, when present, must agree. Unknown keys are rejected.
    pub fn from_toml_str(model: ModelTag, text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = match toml::Value::try_from(Self::defaults(model)).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        for (key, value) in overrides {
            if !table.contains_key(&key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            table.insert(key, value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.model != model {
            return Err(Error::Config(format!(
                "config is for model '{}', requested '{model}'",
                cfg.model
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(model: ModelTag, path: &Path) -> Result<Self> {
        Self::from_toml_str(model, &std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
