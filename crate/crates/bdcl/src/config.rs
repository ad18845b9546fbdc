//! One structured config document covering every module's parameters, plus a
//! content-hash fingerprint embedded in reports for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{ProfileKind, SynthConfig};
use crate::priors::provider::RPolicy;
use crate::priors::Aggregation;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable consulted for the default config path.
pub const CONFIG_ENV_VAR: &str = "BDCL_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported config schema version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { latent_dim: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorsConfig {
    pub fidelity: f64,
    #[serde(default)]
    pub r_policy: RPolicy,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub au_table: Option<PathBuf>,
    #[serde(default)]
    pub prosody_lexicon: Option<PathBuf>,
    #[serde(default)]
    pub text_lexicon: Option<PathBuf>,
    #[serde(default)]
    pub strict_ingest: bool,
}

impl Default for PriorsConfig {
    fn default() -> Self {
        PriorsConfig {
            fidelity: 1.0,
            r_policy: RPolicy::Uniform,
            aggregation: Aggregation::WeightedSum,
            au_table: None,
            prosody_lexicon: None,
            text_lexicon: None,
            strict_ingest: false,
        }
    }
}

/// Inputs for the `profile-sample` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub kind: ProfileKind,
    pub base_counts: Vec<usize>,
    pub pool_counts: Vec<usize>,
    pub extra: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            kind: ProfileKind::Matched,
            base_counts: vec![1200, 900, 700, 600, 400, 224],
            pool_counts: vec![1000; 6],
            extra: 1000,
        }
    }
}

/// Inputs for the `compare-losses` subcommand: one synthetic run per
/// imbalance profile, dual objective vs the plain baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareConfig {
    pub profiles: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            profiles: vec![vec![200, 40, 10], vec![100, 100, 100]],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub priors: PriorsConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// A config together with the hash of the bytes it was loaded from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub fingerprint: String,
}

/// SHA-256 of the raw config bytes, hex encoded.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: ExperimentConfig =
        serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if config.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(ConfigError::Version(config.schema_version));
    }
    Ok(LoadedConfig {
        config,
        fingerprint: fingerprint(&bytes),
    })
}
