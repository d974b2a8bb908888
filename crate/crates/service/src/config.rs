//! Service settings from a `key=value` properties file.
//!
//! Recognized keys: `server.port`, `store.path`, `bundle.initial`,
//! `limits.max_body_bytes`. Blank lines and lines starting with `#` or `!`
//! are ignored. Command-line flags are applied on top of the file.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub const DEFAULT_PORT: u16 = 8334;
pub const DEFAULT_MAX_BODY_BYTES: usize = 64 * 1024 * 1024;
/// Environment variable naming the properties file.
pub const CONFIG_ENV: &str = "RUNNER_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid {key} {value:?}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub store_path: PathBuf,
    pub initial_bundle: Option<PathBuf>,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: DEFAULT_PORT,
            store_path: PathBuf::from("store"),
            initial_bundle: None,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
        }
    }
}

impl ServiceConfig {
    pub fn from_properties(text: &str) -> Result<Self, ConfigError> {
        let mut config = ServiceConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('!') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if !config.set(key, value)? {
                return Err(ConfigError::UnknownKey { line: i + 1, key: key.to_string() });
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_properties(&text)
    }

    /// Applies one setting; returns false for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let invalid = |reason: &str| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "server.port" => self.port = parse_port(value).map_err(|r| invalid(&r))?,
            "store.path" => {
                if value.is_empty() {
                    return Err(invalid("must not be empty"));
                }
                self.store_path = PathBuf::from(value);
            }
            "bundle.initial" => self.initial_bundle = (!value.is_empty()).then(|| PathBuf::from(value)),
            "limits.max_body_bytes" => {
                self.max_body_bytes = match value.parse::<usize>() {
                    Ok(n) if n > 0 => n,
                    _ => return Err(invalid("expected a positive integer")),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub fn parse_port(value: &str) -> Result<u16, String> {
    match value.parse::<u64>() {
        Ok(n) if (1..=65535).contains(&n) => Ok(n as u16),
        Ok(_) => Err("port must be in 1..65535".into()),
        Err(_) => Err("expected an integer".into()),
    }
}
