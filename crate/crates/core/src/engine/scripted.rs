use std::path::Path;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::{Engine, EngineError, EngineReply, EngineRequest};

/// Canned replies keyed by prompt substrings. A rule listing several replies hands
/// them out in order on successive matches and then repeats the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub pattern: String,
    pub replies: Vec<String>,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            replies: vec![reply.into()],
        }
    }

    pub fn sequence(pattern: impl Into<String>, replies: Vec<String>) -> Self {
        Self {
            pattern: pattern.into(),
            replies,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedBehavior {
    pub rules: Vec<ScriptRule>,
    pub default_reply: String,
    pub injected_latency_ms: u64,
    /// Zero-based call indices that fail with `Unavailable`.
    pub failure_schedule: Vec<u64>,
}

impl ScriptedBehavior {
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.injected_latency_ms = ms;
        self
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = reply.into();
        self
    }

    pub fn failing_at(mut self, calls: Vec<u64>) -> Self {
        self.failure_schedule = calls;
        self
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    calls: u64,
    rule_hits: Vec<usize>,
}

/// Deterministic engine: identical request sequences yield identical replies.
#[derive(Debug)]
pub struct ScriptedEngine {
    id: String,
    behavior: ScriptedBehavior,
    state: Mutex<ScriptState>,
}

impl ScriptedEngine {
    pub fn new(id: impl Into<String>, behavior: ScriptedBehavior) -> Self {
        let hits = vec![0; behavior.rules.len()];
        Self {
            id: id.into(),
            behavior,
            state: Mutex::new(ScriptState {
                calls: 0,
                rule_hits: hits,
            }),
        }
    }

    pub async fn calls(&self) -> u64 {
        self.state.lock().await.calls
    }
}

#[async_trait]
impl Engine for ScriptedEngine {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &EngineRequest) -> Result<EngineReply, EngineError> {
        let start = Instant::now();
        request.validate()?;
        let (call, text) = {
            let mut state = self.state.lock().await;
            let call = state.calls;
            state.calls += 1;
            let rule = self
                .behavior
                .rules
                .iter()
                .position(|r| request.prompt.contains(&r.pattern));
            let text = match rule {
                Some(i) => {
                    let replies = &self.behavior.rules[i].replies;
                    let n = state.rule_hits[i];
                    state.rule_hits[i] += 1;
                    replies
                        .get(n)
                        .or(replies.last())
                        .cloned()
                        .unwrap_or_default()
                }
                None => self.behavior.default_reply.clone(),
            };
            (call, text)
        };
        if self.behavior.failure_schedule.contains(&call) {
            return Err(EngineError::Unavailable(format!(
                "{}: scripted failure at call {call}",
                self.id
            )));
        }
        if self.behavior.injected_latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.behavior.injected_latency_ms)).await;
        }
        Ok(EngineReply {
            text,
            latency: start.elapsed(),
            engine_id: self.id.clone(),
        })
    }
}
