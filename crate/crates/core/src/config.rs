//! The JSON run configuration shared by every command. Every field has a
//! default, so `{}` is a complete configuration; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CorpusSpec;
use crate::diffusion::SamplerConfig;
use crate::evaluation::EvalOptions;
use crate::training::TrainConfig;
use crate::vq::FitOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Number of loudness codewords.
    pub k: usize,
    /// Cluster whole 16-value loudness vectors instead of single readings.
    pub joint: bool,
    pub fit: FitOptions,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig { k: crate::vq::DEFAULT_K, joint: false, fit: FitOptions::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub sampler: SamplerConfig,
    /// Samples shared by neighbouring chunks, blended with a linear
    /// cross-fade. 0 concatenates chunks end to end.
    pub overlap_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub codebook: CodebookConfig,
    /// Model, encoder and optimizer settings.
    pub train: TrainConfig,
    pub convert: ConvertConfig,
    pub evaluate: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.train.model = cfg.train.model.normalized();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.codebook.k != self.train.model.codebook_size {
            return Err(ConfigError::Invalid(format!(
                "codebook.k {} differs from train.model.codebook_size {}",
                self.codebook.k, self.train.model.codebook_size
            )));
        }
        if self.convert.overlap_samples >= self.train.segment_length {
            return Err(ConfigError::Invalid("overlap must be shorter than the segment length".into()));
        }
        Ok(())
    }
}
