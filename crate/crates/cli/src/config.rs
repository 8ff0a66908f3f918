//! Daemon configuration file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use orchestra_core::kernel::KernelConfig;
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
#[error("{path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

/// `serve --config` file, YAML or JSON. Relative paths resolve against the
/// file's directory.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Directory holding agents.json, catalog.json, templates.json and data/.
    pub seeds: PathBuf,
    /// Bearer token required on mutating routes; open when absent.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub summarize_with_model: bool,
    #[serde(default)]
    pub approval_timeout_s: Option<u64>,
    #[serde(default)]
    pub confirm_timeout_s: Option<u64>,
}

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |reason: String| ConfigError {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config: ServeConfig = serde_yaml::from_str(&text).map_err(|e| err(e.to_string()))?;
        if config.seeds.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.seeds = base.join(&config.seeds);
        }
        config
            .bind
            .parse::<std::net::SocketAddr>()
            .map_err(|e| err(format!("bind {:?}: {e}", config.bind)))?;
        Ok(config)
    }

    pub fn kernel_config(&self) -> KernelConfig {
        let mut k = KernelConfig::from_seed_dir(&self.seeds);
        k.summarize_with_model = self.summarize_with_model;
        if let Some(s) = self.approval_timeout_s {
            k.coordinator.approval_timeout = Duration::from_secs(s);
        }
        if let Some(s) = self.confirm_timeout_s {
            k.coordinator.confirm_timeout = Duration::from_secs(s);
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_seeds_resolve_against_the_file() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("serve.yaml");
        std::fs::write(&path, "seeds: seeds\ntoken: t\n").unwrap();
        let c = ServeConfig::load(&path).unwrap();
        assert_eq!(c.seeds, dir.path().join("seeds"));
        assert_eq!(c.bind, DEFAULT_BIND);
        assert_eq!(c.token.as_deref(), Some("t"));
    }

    #[test]
    fn unknown_keys_and_bad_bind_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("serve.yaml");
        std::fs::write(&path, "seeds: s\nport: 1\n").unwrap();
        assert!(ServeConfig::load(&path).is_err());
        std::fs::write(&path, "seeds: s\nbind: nowhere\n").unwrap();
        assert!(ServeConfig::load(&path).is_err());
    }
}
