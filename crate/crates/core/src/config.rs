//! Run configuration document (TOML).
//!
//! ```toml
//! [model]
//! heads = 1
//! [model.neuron]
//! zeta = 0.5
//! [train]
//! epochs = 3
//! timesteps = 4
//! [ablation]
//! rgb_only = true
//! ```
//!
//! Every section is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Thresholds stay at their initial value.
    pub fixed_threshold: bool,
    /// The LAB branch is removed.
    pub rgb_only: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Model hyperparameters with the ablation flags applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.rgb_only {
            m.rgb_only = true;
        }
        if self.ablation.fixed_threshold {
            m.neuron.adaptive = false;
        }
        m
    }
}
