//! Run configuration: one JSON file drives data generation, tokenizer
//! training, both training stages, and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::BaselineConfig;
use crate::data::DataConfig;
use crate::memory::MemoryDecoderConfig;
use crate::training::TrainingConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_decode_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_decode_len: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Seed,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub baseline: BaselineConfig,
    pub memory: MemoryDecoderConfig,
    pub training: StageConfigs,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Default for Seed {
    fn default() -> Self {
        Seed(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub baseline: TrainingConfig,
    pub memory: TrainingConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.baseline.feature_dim != self.data.feature_dim {
            return Err(ConfigError::Invalid(format!(
                "baseline feature_dim {} != data feature_dim {}",
                self.baseline.feature_dim, self.data.feature_dim
            )));
        }
        if self.baseline.vocab_size != self.tokenizer.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "baseline vocab_size {} != tokenizer vocab_size {}",
                self.baseline.vocab_size, self.tokenizer.vocab_size
            )));
        }
        if self.baseline.d_model % self.baseline.heads != 0 {
            return Err(ConfigError::Invalid("d_model must divide by heads".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form; stamped into checkpoints so
    /// mismatched config/checkpoint pairs are caught at load time.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_and_hash_stability() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = Seed(2);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: Result<RunConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.feature_dim = 13;
        assert!(cfg.validate().is_err());
    }
}
