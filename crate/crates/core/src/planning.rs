//! Planning: background extraction, decomposition into sub-task chains, and the
//! fan-out of one task to several independent planners.

use std::time::Duration;

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DEFAULT_MAX_SUBTASKS, DEFAULT_RETRIES};
use crate::engine::{Engine, EngineRequest, SamplingParams};
use crate::events::{Event, EventKind, EventLog};
use crate::execution::{slot_seed, ChainOfThought};
use crate::ledger::AgentRecord;
use crate::matching::{selection_order, RequirementVector};
use crate::prompts::PromptTemplates;
use crate::protocol::{now_millis, AgentId, BeaconBody, BeaconResponseBody, Slot};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanningError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("no planners available")]
    NoPlanners,
    #[error("planning failed for chain {chain_id}: {reason}")]
    PlanningFailed { chain_id: u32, reason: String },
    #[error("planning failed for task {task_id}: {}", reasons.join("; "))]
    AllChainsFailed { task_id: String, reasons: Vec<String> },
}

/// A user query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescription {
    pub task_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl TaskDescription {
    pub fn new(task_id: impl Into<String>, text: impl Into<String>) -> Result<Self, PlanningError> {
        let task = Self {
            task_id: task_id.into(),
            text: text.into(),
            options: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), PlanningError> {
        if self.text.trim().is_empty() {
            return Err(PlanningError::InvalidTask("task text is empty".into()));
        }
        if self.task_id.is_empty() {
            return Err(PlanningError::InvalidTask("task id is empty".into()));
        }
        Ok(())
    }

    /// The text substituted for `{user_input}`: the task, then any answer options.
    pub fn user_input(&self) -> String {
        match &self.options {
            Some(opts) if !opts.is_empty() => format!("{}\nOptions: {}", self.text, opts.join("; ")),
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerSettings {
    pub templates: PromptTemplates,
    pub params: SamplingParams,
    pub max_subtasks: usize,
    pub retries: usize,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            params: SamplingParams::default(),
            max_subtasks: DEFAULT_MAX_SUBTASKS,
            retries: DEFAULT_RETRIES,
        }
    }
}

/// Parses a decomposition reply into sub-task questions without their `Q<n>:`
/// prefixes. Text outside the outermost braces is ignored.
pub fn parse_decomposition(raw: &str, max_subtasks: usize) -> Result<Vec<String>, String> {
    let (Some(start), Some(end)) = (raw.find('{'), raw.rfind('}')) else {
        return Err("no JSON object in output".into());
    };
    if end < start {
        return Err("no JSON object in output".into());
    }
    let value: serde_json::Value =
        serde_json::from_str(&raw[start..=end]).map_err(|e| format!("malformed JSON: {e}"))?;
    let obj = value.as_object().ok_or("output is not a JSON object")?;
    if !obj.get("original_question").is_some_and(|q| q.is_string()) {
        return Err("missing string field original_question".into());
    }
    let items = obj
        .get("subtasks")
        .and_then(|s| s.as_array())
        .ok_or("missing array field subtasks")?;
    if items.is_empty() {
        return Err("subtasks is empty".into());
    }
    if items.len() > max_subtasks {
        return Err(format!("{} subtasks exceed the limit of {max_subtasks}", items.len()));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let s = item.as_str().ok_or(format!("subtask {} is not a string", i + 1))?;
            let prefix = format!("Q{}:", i + 1);
            let body = s
                .trim()
                .strip_prefix(&prefix)
                .ok_or(format!("subtask {} does not start with {prefix}", i + 1))?
                .trim();
            if body.is_empty() {
                return Err(format!("subtask {} is empty", i + 1));
            }
            if !body.ends_with('?') {
                return Err(format!("subtask {} is not phrased as a question", i + 1));
            }
            Ok(body.to_string())
        })
        .collect()
}

async fn call(
    engine: &dyn Engine,
    prompt: &str,
    settings: &PlannerSettings,
    seed: u64,
    slot: &Slot,
    events: &EventLog,
) -> Result<String, String> {
    let request = EngineRequest::new(prompt, settings.params).with_seed(seed);
    let reply = engine.generate(&request).await.map_err(|e| e.to_string())?;
    events.record(
        Event::at_slot(EventKind::EngineDone, slot).latency_us(reply.latency.as_micros() as u64),
    );
    Ok(reply.text)
}

pub async fn extract_background(
    task: &TaskDescription,
    engine: &dyn Engine,
    settings: &PlannerSettings,
    chain_id: u32,
    events: &EventLog,
) -> Result<String, PlanningError> {
    let slot = Slot::new(&task.task_id, chain_id, 0);
    let prompt = settings.templates.background_prompt(&task.user_input());
    let mut reason = String::new();
    for attempt in 0..=settings.retries {
        match call(engine, &prompt, settings, slot_seed(1, &slot, attempt), &slot, events).await {
            Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
            Ok(_) => reason = "empty background".into(),
            Err(e) => reason = e,
        }
    }
    Err(PlanningError::PlanningFailed { chain_id, reason })
}

/// Asks the engine for a decomposition, reprompting once on a malformed reply.
pub async fn decompose(
    task: &TaskDescription,
    background: &str,
    engine: &dyn Engine,
    settings: &PlannerSettings,
    chain_id: u32,
    planner: AgentId,
    events: &EventLog,
) -> Result<ChainOfThought, PlanningError> {
    let slot = Slot::new(&task.task_id, chain_id, 0);
    let prompt = settings.templates.decomposition_prompt(&task.user_input());
    let mut reason = String::new();
    for attempt in 0..=settings.retries {
        let parsed = call(engine, &prompt, settings, slot_seed(2, &slot, attempt), &slot, events)
            .await
            .and_then(|raw| parse_decomposition(&raw, settings.max_subtasks));
        match parsed {
            Ok(subtasks) => {
                return Ok(ChainOfThought {
                    chain_id,
                    background: background.to_string(),
                    subtasks,
                    planner,
                })
            }
            Err(e) => {
                tracing::warn!(task_id = %task.task_id, chain_id, attempt, error = %e, "bad decomposition");
                reason = e;
            }
        }
    }
    Err(PlanningError::PlanningFailed { chain_id, reason })
}

/// One planner's work: background, then decomposition.
pub async fn plan_chain(
    task: &TaskDescription,
    engine: &dyn Engine,
    settings: &PlannerSettings,
    chain_id: u32,
    planner: AgentId,
    events: &EventLog,
) -> Result<ChainOfThought, PlanningError> {
    let background = extract_background(task, engine, settings, chain_id, events).await?;
    decompose(task, &background, engine, settings, chain_id, planner, events).await
}

/// Top `m` responders by the executor selection order.
pub fn select_planners(responses: &[(AgentId, BeaconResponseBody)], m: usize) -> Vec<AgentId> {
    let mut sorted = responses.to_vec();
    sorted.sort_by(selection_order);
    sorted.dedup_by(|a, b| a.0 == b.0);
    sorted.into_iter().take(m).map(|(id, _)| id).collect()
}

/// Finds and beacons planners. Enough for a submitter whose planners coordinate
/// their own chains.
#[async_trait]
pub trait PlannerDirectory: Send + Sync {
    async fn available_planners(&self) -> Vec<AgentRecord>;

    async fn solicit(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)>;

    fn events(&self) -> &EventLog;
}

/// A directory whose planners can be asked for a chain directly.
#[async_trait]
pub trait PlannerPool: PlannerDirectory {
    async fn plan(
        &self,
        planner: &AgentId,
        chain_id: u32,
        task: &TaskDescription,
    ) -> Result<ChainOfThought, PlanningError>;
}

/// Beacons the available planners with the planning requirement and returns the
/// `min(m, responders)` best, best first. The beacon uses the task's slot `(0, 0)`.
pub async fn solicit_planners(
    pool: &dyn PlannerDirectory,
    task: &TaskDescription,
    requirement: &RequirementVector,
    m: usize,
    timeout: Duration,
) -> Result<Vec<AgentId>, PlanningError> {
    let slot = Slot::new(&task.task_id, 0, 0);
    for wait in [timeout, timeout * 2] {
        let targets: Vec<AgentId> = pool
            .available_planners()
            .await
            .iter()
            .map(AgentRecord::agent_id)
            .collect();
        if targets.is_empty() {
            return Err(PlanningError::NoPlanners);
        }
        let beacon = BeaconBody {
            requirement_vector: requirement.components().to_vec(),
            subtask_text: task.user_input(),
            respond_by: now_millis() + wait.as_millis() as u64,
        };
        pool.events()
            .record(Event::new(EventKind::BeaconSent, &task.task_id));
        let responses = pool.solicit(&slot, &beacon, &targets, wait).await;
        let chosen = select_planners(&responses, m);
        if !chosen.is_empty() {
            return Ok(chosen);
        }
    }
    Err(PlanningError::NoPlanners)
}

/// Selects up to `m` planners and has each produce one chain concurrently. Chains
/// that fail or miss `deadline` are dropped; at least one must survive.
pub async fn plan_fanout(
    pool: &dyn PlannerPool,
    task: &TaskDescription,
    requirement: &RequirementVector,
    m: usize,
    timeout: Duration,
    deadline: Duration,
) -> Result<Vec<ChainOfThought>, PlanningError> {
    if m == 0 {
        return Err(PlanningError::InvalidTask("at least one chain is required".into()));
    }
    task.validate()?;
    let planners = solicit_planners(pool, task, requirement, m, timeout).await?;
    let jobs = planners.iter().enumerate().map(|(i, planner)| async move {
        let chain_id = i as u32;
        pool.events().record(
            Event::new(EventKind::ExecutorSelected, &task.task_id)
                .chain(chain_id)
                .agent(*planner),
        );
        match tokio::time::timeout(deadline, pool.plan(planner, chain_id, task)).await {
            Ok(result) => result,
            Err(_) => Err(PlanningError::PlanningFailed {
                chain_id,
                reason: "planner deadline elapsed".into(),
            }),
        }
    });
    let mut chains = Vec::new();
    let mut reasons = Vec::new();
    for result in join_all(jobs).await {
        match result {
            Ok(chain) => chains.push(chain),
            Err(e) => reasons.push(e.to_string()),
        }
    }
    if chains.is_empty() {
        return Err(PlanningError::AllChainsFailed {
            task_id: task.task_id.clone(),
            reasons,
        });
    }
    Ok(chains)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE_1: &str = r#"{
  "original_question": "One root of the equation $5x^2+kx=4$ is 2. What is the other?",
  "subtasks": [
    "Q1: What is the equation rewritten in standard quadratic form?",
    "Q2: What is the product of the roots of this quadratic equation?",
    "Q3: Given one root is 2, what is the other root?"
  ]
}"#;

    #[test]
    fn parses_worked_example() {
        let subtasks = parse_decomposition(EXAMPLE_1, 8).unwrap();
        assert_eq!(subtasks.len(), 3);
        assert_eq!(subtasks[0], "What is the equation rewritten in standard quadratic form?");
    }

    #[test]
    fn strips_surrounding_prose() {
        let wrapped = format!("Sure! Here is the plan:\n{EXAMPLE_1}\nHope this helps.");
        assert_eq!(
            parse_decomposition(&wrapped, 8).unwrap(),
            parse_decomposition(EXAMPLE_1, 8).unwrap()
        );
    }

    #[test]
    fn rejects_schema_violations() {
        let q = r#""original_question":"x""#;
        for bad in [
            r#"{"subtasks": []}"#.to_string(),
            format!(r#"{{{q},"subtasks": []}}"#),
            format!(r#"{{{q},"subtasks": ["Q2: a?"]}}"#),
            format!(r#"{{{q},"subtasks": ["Q1: a?", "Q3: b?"]}}"#),
            format!(r#"{{{q},"subtasks": ["Q1: a"]}}"#),
            format!(r#"{{{q},"subtasks": ["Q1:   "]}}"#),
            format!(r#"{{{q},"subtasks": [1]}}"#),
            "no json here".to_string(),
            "} backwards {".to_string(),
        ] {
            assert!(parse_decomposition(&bad, 8).is_err(), "{bad}");
        }
        let nine: Vec<String> = (1..=9).map(|i| format!("\"Q{i}: s?\"")).collect();
        let too_many = format!(r#"{{{q},"subtasks": [{}]}}"#, nine.join(","));
        assert!(parse_decomposition(&too_many, 8).is_err());
        assert_eq!(parse_decomposition(&too_many, 9).unwrap().len(), 9);
    }

    #[test]
    fn planner_selection_is_top_m() {
        use crate::protocol::Identity;
        let ids: Vec<AgentId> = (1..=8u8).map(|s| Identity::from_seed([s; 32]).agent_id()).collect();
        let responses: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                (
                    *id,
                    BeaconResponseBody {
                        score: i as f64 / 10.0,
                        responder_load: 0,
                        responded_at: 100,
                    },
                )
            })
            .collect();
        assert_eq!(select_planners(&responses, 3), vec![ids[7], ids[6], ids[5]]);
        assert_eq!(select_planners(&responses[..1], 3), vec![ids[0]]);
    }

    #[test]
    fn options_are_appended() {
        let mut t = TaskDescription::new("t", "Pick one.").unwrap();
        t.options = Some(vec!["Yes".into(), "No".into()]);
        assert_eq!(t.user_input(), "Pick one.\nOptions: Yes; No");
        assert!(TaskDescription::new("t", "  ").is_err());
    }
}
