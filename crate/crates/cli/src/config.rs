//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7
//! output = "runs/desk"          # optional, `--out` wins
//!
//! [encoder]
//! image_size = 16
//! channels = 3
//! patch_size = 4
//! embed_dim = 32
//! depth = 6
//! heads = 4
//! adapted_blocks = 6
//! update_target = "attention_qkv"   # or "mlp"
//!
//! [trainer]
//! epochs = 30
//! batch_size = 32
//! learning_rate = 0.05
//! momentum = 0.9
//! precision = "double"              # or "single"
//!
//! [protocol]
//! base_class_count = 20
//! ways = 5
//! shots = 5
//! sessions = 4
//!
//! [data]
//! source = "synthetic"              # or "file" with `path = ".../manifest.csv"`
//! [data.synthetic]
//! classes = 40
//! samples_per_class = 25
//! separation = 1.0
//! noise_std = 0.2
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use fscil_core::data::SyntheticParams;
use fscil_core::{EncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub trainer: TrainConfig,
    pub protocol: ProtocolConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub base_class_count: usize,
    /// Classes per incremental session (N).
    pub ways: usize,
    /// Training samples per incremental class (K).
    pub shots: usize,
    /// Number of incremental sessions (T).
    pub sessions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticParams>,
    /// Manifest of an on-disk dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.trainer.seed != 0 && cfg.trainer.seed != cfg.seed {
            return Err(CliError::Config(
                "trainer.seed conflicts with the top-level seed; set only `seed`".into(),
            ));
        }
        cfg.trainer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(p) = cfg.data.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.trainer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: fscil_core::Error| CliError::Config(e.to_string());
        self.encoder.validate().map_err(cfg_err)?;
        self.trainer.validate().map_err(cfg_err)?;
        let p = &self.protocol;
        if p.base_class_count == 0 {
            return Err(CliError::Config("protocol.base_class_count must be positive".into()));
        }
        if p.sessions > 0 && p.ways == 0 {
            return Err(CliError::Config("protocol.ways must be positive".into()));
        }
        if p.sessions > 0 && p.shots == 0 {
            return Err(CliError::Config("protocol.shots must be positive".into()));
        }
        match self.data.source {
            DataSource::Synthetic => {
                let params = self
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| CliError::Config("data.synthetic is required when data.source = \"synthetic\"".into()))?;
                params.validate().map_err(cfg_err)?;
            }
            DataSource::File => {
                if self.data.path.is_none() {
                    return Err(CliError::Config("data.path is required when data.source = \"file\"".into()));
                }
            }
        }
        Ok(())
    }
}
