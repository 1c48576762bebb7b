//! TOML configuration files for the service and the simulator.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::BranchConfig;
use crate::dialog::DialogConfig;
use crate::inference::{InferenceBackend, MockBackend, RemoteBackend};
use crate::ranging::RangingConfig;
use crate::station::AgentStation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    #[default]
    Mock,
    Remote {
        url: String,
    },
}

impl BackendConfig {
    pub fn build(&self, timeout_ms: u64) -> Arc<dyn InferenceBackend> {
        match self {
            BackendConfig::Mock => Arc::new(MockBackend),
            BackendConfig::Remote { url } => Arc::new(RemoteBackend::new(url.clone(), timeout_ms)),
        }
    }
}

/// Service configuration file.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// audit_file = "audit.chain"      # optional
/// event_log = "events.jsonl"      # optional, one envelope per line
/// auto_dispatch = true            # serve the next customer when a station frees up
///
/// [branch]
/// heartbeat_interval_ms = 5000
/// [branch.credentials]
/// "1001" = "1234"
/// [branch.role_matrix]
/// CustomerService = ["profile.name", "queue.position", "faq.read"]
/// # ...
///
/// [backend]
/// kind = "mock"                   # or: kind = "remote", url = "http://..."
///
/// [[stations]]                    # registry seed
/// station_id = 1
/// # ...
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub branch: BranchConfig,
    pub dialog: DialogConfig,
    pub backend: BackendConfig,
    pub ranging: RangingConfig,
    pub audit_file: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    pub auto_dispatch: bool,
    pub stations: Vec<AgentStation>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            branch: BranchConfig::default(),
            dialog: DialogConfig::default(),
            backend: BackendConfig::default(),
            ranging: RangingConfig::default(),
            audit_file: None,
            event_log: None,
            auto_dispatch: true,
            stations: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.branch.validate().map_err(ConfigError::Invalid)?;
        self.ranging
            .validate()
            .map_err(|e| ConfigError::Invalid(e.0))?;
        for s in &self.stations {
            s.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut ids: Vec<_> = self.stations.iter().map(|s| s.station_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid("duplicate station_id".into()));
        }
        Ok(())
    }
}
