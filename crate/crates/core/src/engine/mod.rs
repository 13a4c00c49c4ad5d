//! Text-generation boundary between orchestration and models.
//!
//! Three implementations share the [`Engine`] contract: [`ScriptedEngine`] for
//! deterministic tests, [`SyntheticEngine`] for seeded ablation runs, and
//! [`RemoteEngine`] for chat-completions HTTP endpoints.

mod remote;
mod scripted;
mod synthetic;

pub use remote::{RemoteConfig, RemoteEngine};
pub use scripted::{ScriptRule, ScriptedBehavior, ScriptedEngine};
pub use synthetic::{
    parse_step_marker, step_marker, SyntheticAgentProfile, SyntheticEngine, SyntheticFixture,
    FIXTURE_CLOSE, FIXTURE_OPEN,
};

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::matching::Taxonomy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("engine unavailable: {0}")]
    Unavailable(String),
    #[error("invalid engine request: {0}")]
    InvalidRequest(String),
    #[error("engine configuration error: {0}")]
    Config(String),
}

/// Sampling parameters passed through to engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl EngineRequest {
    pub fn new(prompt: impl Into<String>, params: SamplingParams) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            top_p: params.top_p,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_tokens < 1 {
            return Err(EngineError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(EngineError::InvalidRequest(
                "temperature must be a nonnegative real".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EngineError::InvalidRequest("top_p must lie in (0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineReply {
    pub text: String,
    /// Wall time of the call, measured at the call boundary.
    pub latency: Duration,
    pub engine_id: String,
}

/// Engine-attributed latency of a reply.
pub fn measure_latency(reply: &EngineReply) -> Duration {
    reply.latency
}

#[async_trait]
pub trait Engine: Send + Sync {
    fn id(&self) -> &str;

    async fn generate(&self, request: &EngineRequest) -> Result<EngineReply, EngineError>;

    /// Startup reachability check.
    async fn probe(&self) -> Result<(), EngineError> {
        Ok(())
    }
}

/// Engine selection in node configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineConfig {
    Scripted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        behavior: Option<ScriptedBehavior>,
        /// Path to a JSON behavior file, relative to the config file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        behavior_path: Option<String>,
    },
    Synthetic {
        profile: SyntheticAgentProfile,
    },
    Remote(RemoteConfig),
}

impl EngineConfig {
    pub fn build(
        &self,
        engine_id: &str,
        base_dir: &Path,
        taxonomy: Arc<Taxonomy>,
    ) -> Result<Arc<dyn Engine>, EngineError> {
        match self {
            EngineConfig::Scripted {
                behavior,
                behavior_path,
            } => {
                let behavior = match (behavior, behavior_path) {
                    (Some(b), None) => b.clone(),
                    (None, Some(p)) => ScriptedBehavior::load(&base_dir.join(p))?,
                    (None, None) => ScriptedBehavior::default(),
                    (Some(_), Some(_)) => {
                        return Err(EngineError::Config(
                            "give either behavior or behavior_path, not both".into(),
                        ))
                    }
                };
                Ok(Arc::new(ScriptedEngine::new(engine_id, behavior)))
            }
            EngineConfig::Synthetic { profile } => Ok(Arc::new(SyntheticEngine::new(
                engine_id,
                profile.clone(),
                taxonomy,
            ))),
            EngineConfig::Remote(cfg) => Ok(Arc::new(RemoteEngine::new(engine_id, cfg.clone())?)),
        }
    }
}
