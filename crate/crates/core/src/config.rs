//! Run configuration: model, training schedule, and evaluation settings,
//! stored as a key-value text snapshot in every run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::train::StagePlan;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Probability threshold for binarizing sigmoid outputs.
    pub threshold: f64,
    /// Inference batch size.
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: StagePlan,
    pub eval: EvalSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config encode error: {0}")]
    Encode(String),
}

impl RunConfig {
    /// Apply one seed to both parameter initialization and training streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.model.init_seed = seed;
        self
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Encode(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}
