use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use drw_core::{KeyError, KeyFile, OutputMode, WatermarkConfig, WatermarkKey};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("cannot load key {path} for token `{token}`: {source}")]
    Key { token: String, path: PathBuf, source: KeyError },
}

/// Per-token entry of the config file. `epsilon` and `tau` fall back to the
/// values stored in the key file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub key_path: PathBuf,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "soft")]
    pub mode: OutputMode,
}

fn soft() -> OutputMode {
    OutputMode::Soft
}

fn default_upstream_timeout() -> u64 {
    10_000
}

fn default_health_timeout() -> u64 {
    1_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub upstream_url: String,
    pub listen_address: String,
    pub log_path: PathBuf,
    pub keys: BTreeMap<String, TokenEntry>,
    #[serde(default)]
    pub serving_seed: u64,
    #[serde(default = "default_upstream_timeout")]
    pub upstream_timeout_ms: u64,
    #[serde(default = "default_health_timeout")]
    pub health_timeout_ms: u64,
}

/// A token's key and serving parameters.
#[derive(Debug, Clone)]
pub struct TokenKey {
    pub key: Arc<WatermarkKey>,
    pub config: WatermarkConfig,
}

/// Loaded configuration; every key file has been read and validated.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub upstream_url: String,
    pub listen_address: String,
    pub log_path: PathBuf,
    pub tokens: HashMap<String, TokenKey>,
    pub serving_seed: u64,
    pub upstream_timeout: Duration,
    pub health_timeout: Duration,
}

impl GatewayConfig {
    /// Reads the config document and every key it names. Relative paths are
    /// taken relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ConfigFile = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_file(file, base).map_err(|e| match e {
            ConfigError::Invalid { reason, .. } => ConfigError::Invalid {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_file(file: ConfigFile, base: &Path) -> Result<Self, ConfigError> {
        let invalid = |reason: String| ConfigError::Invalid {
            path: base.to_path_buf(),
            reason,
        };
        if file.keys.is_empty() {
            return Err(invalid("no API tokens configured".into()));
        }
        let mut tokens = HashMap::new();
        for (token, entry) in file.keys {
            if token.is_empty() {
                return Err(invalid("empty API token".into()));
            }
            let key_path = base.join(&entry.key_path);
            let key_error = |source| ConfigError::Key {
                token: token.clone(),
                path: key_path.clone(),
                source,
            };
            let key_file = KeyFile::load(&key_path).map_err(key_error)?;
            let epsilon = entry.epsilon.or(key_file.epsilon);
            let tau = entry.tau.or(key_file.tau);
            let (Some(epsilon), Some(tau)) = (epsilon, tau) else {
                return Err(invalid(format!(
                    "token `{token}`: epsilon and tau are neither in the config nor in {}",
                    key_path.display()
                )));
            };
            let config = WatermarkConfig::new(epsilon, tau, entry.mode).map_err(key_error)?;
            tokens.insert(
                token,
                TokenKey {
                    key: Arc::new(key_file.key),
                    config,
                },
            );
        }
        Ok(Self {
            upstream_url: file.upstream_url,
            listen_address: file.listen_address,
            log_path: base.join(file.log_path),
            tokens,
            serving_seed: file.serving_seed,
            upstream_timeout: Duration::from_millis(file.upstream_timeout_ms),
            health_timeout: Duration::from_millis(file.health_timeout_ms),
        })
    }
}
