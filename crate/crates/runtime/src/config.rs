//! Node configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use agora_core::config as defaults;
use agora_core::engine::{EngineConfig, SamplingParams};
use agora_core::execution::SelectionPolicy;
use agora_core::ledger::{validate_capabilities, PeerAddress, Role};
use agora_core::matching::Taxonomy;
use agora_core::prompts::PromptTemplates;
use agora_core::protocol::{to_canonical_json, Identity};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Intervals and deadlines, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub heartbeat_interval_ms: u64,
    pub sync_interval_ms: u64,
    pub liveness_ttl_ms: u64,
    pub beacon_timeout_ms: u64,
    pub step_deadline_ms: u64,
    pub task_deadline_ms: u64,
    pub connect_timeout_ms: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            heartbeat_interval_ms: defaults::DEFAULT_HEARTBEAT_INTERVAL.as_millis() as u64,
            sync_interval_ms: defaults::DEFAULT_SYNC_INTERVAL.as_millis() as u64,
            liveness_ttl_ms: defaults::DEFAULT_LIVENESS_TTL_MS,
            beacon_timeout_ms: defaults::DEFAULT_BEACON_TIMEOUT.as_millis() as u64,
            step_deadline_ms: defaults::DEFAULT_STEP_DEADLINE.as_millis() as u64,
            task_deadline_ms: defaults::DEFAULT_TASK_DEADLINE.as_millis() as u64,
            connect_timeout_ms: 2_000,
        }
    }
}

impl Timing {
    pub fn heartbeat_interval(&self) -> Duration {
        Duration::from_millis(self.heartbeat_interval_ms)
    }
    pub fn sync_interval(&self) -> Duration {
        Duration::from_millis(self.sync_interval_ms)
    }
    pub fn beacon_timeout(&self) -> Duration {
        Duration::from_millis(self.beacon_timeout_ms)
    }
    pub fn step_deadline(&self) -> Duration {
        Duration::from_millis(self.step_deadline_ms)
    }
    pub fn task_deadline(&self) -> Duration {
        Duration::from_millis(self.task_deadline_ms)
    }
    pub fn connect_timeout(&self) -> Duration {
        Duration::from_millis(self.connect_timeout_ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatePaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub execution: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    /// Advertised peer address; the first listener binds here.
    pub listen: PeerAddress,
    /// Further peer listeners, e.g. one per network the host sits on.
    #[serde(default)]
    pub extra_listen: Vec<PeerAddress>,
    #[serde(default)]
    pub seeds: Vec<PeerAddress>,
    pub roles: BTreeSet<Role>,
    pub capability_vector: Vec<f64>,
    pub engine: EngineConfig,
    #[serde(default)]
    pub model_path: String,
    #[serde(default)]
    pub gpu_allocation: String,
    /// 64 hex characters; a fresh key is generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_seed: Option<String>,
    /// HTTP admin gateway address.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<PeerAddress>,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub templates: TemplatePaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy_path: Option<String>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_log: Option<String>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl NodeConfig {
    /// A config with default timing and no optional features.
    pub fn new(
        listen: PeerAddress,
        roles: impl IntoIterator<Item = Role>,
        capability_vector: Vec<f64>,
        engine: EngineConfig,
    ) -> Self {
        Self {
            listen,
            extra_listen: Vec::new(),
            seeds: Vec::new(),
            roles: roles.into_iter().collect(),
            capability_vector,
            engine,
            model_path: String::new(),
            gpu_allocation: String::new(),
            identity_seed: None,
            gateway: None,
            timing: Timing::default(),
            templates: TemplatePaths::default(),
            taxonomy_path: None,
            sampling: SamplingParams::default(),
            selection: None,
            event_log: None,
            ledger_log: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&bytes)?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(cfg)
    }

    /// Parses a config whose relative paths resolve against the working directory.
    pub fn parse(bytes: &[u8]) -> Result<Self, ConfigError> {
        let mut config: Self = serde_json::from_slice(bytes).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.base_dir = PathBuf::from(".");
        Ok(config)
    }

    /// Canonical JSON form, as written by `agora` tooling.
    pub fn to_canonical_bytes(&self) -> Result<Vec<u8>, ConfigError> {
        to_canonical_json(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn validate(&self, dimension: usize) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for addr in std::iter::once(&self.listen).chain(&self.extra_listen).chain(&self.seeds) {
            if addr.port == 0 {
                return invalid(format!("port of {addr} must lie in [1, 65535]"));
            }
            if addr.host.is_empty() {
                return invalid("empty host".into());
            }
        }
        if self.gateway.as_ref().is_some_and(|g| g.port == 0) {
            return invalid("gateway port must lie in [1, 65535]".into());
        }
        if self.roles.is_empty() {
            return invalid("roles must be nonempty".into());
        }
        validate_capabilities(&self.capability_vector, dimension)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.timing;
        if [t.heartbeat_interval_ms, t.sync_interval_ms, t.beacon_timeout_ms, t.step_deadline_ms, t.task_deadline_ms]
            .contains(&0)
        {
            return invalid("intervals and deadlines must be positive".into());
        }
        if t.liveness_ttl_ms <= t.heartbeat_interval_ms {
            return invalid("liveness_ttl_ms must exceed heartbeat_interval_ms".into());
        }
        if let Some(seed) = &self.identity_seed {
            self.identity_from(seed)?;
        }
        Ok(())
    }

    fn identity_from(&self, seed: &str) -> Result<Identity, ConfigError> {
        let bytes = hex::decode(seed).map_err(|e| ConfigError::Invalid(format!("identity_seed: {e}")))?;
        Identity::from_secret_slice(&bytes).map_err(|e| ConfigError::Invalid(format!("identity_seed: {e}")))
    }

    pub fn identity(&self) -> Result<Identity, ConfigError> {
        match &self.identity_seed {
            Some(seed) => self.identity_from(seed),
            None => Ok(Identity::generate(&mut rand::rngs::OsRng)),
        }
    }

    pub fn taxonomy(&self) -> Result<Taxonomy, ConfigError> {
        match &self.taxonomy_path {
            None => Ok(Taxonomy::default_taxonomy()),
            Some(p) => Taxonomy::load(&self.resolve(p)).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }

    pub fn prompt_templates(&self) -> Result<PromptTemplates, ConfigError> {
        let t = &self.templates;
        let path = |p: &Option<String>| p.as_deref().map(|p| self.resolve(p));
        let (d, e, b) = (path(&t.decomposition), path(&t.execution), path(&t.background));
        PromptTemplates::load(d.as_deref(), e.as_deref(), b.as_deref())
            .map_err(|e| ConfigError::Invalid(format!("templates: {e}")))
    }
}
