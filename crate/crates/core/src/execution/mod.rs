//! Chain execution: per-step beacon rounds, executor selection, context-chained
//! dispatch, boxed-answer extraction, and recovery from failed executors.
//!
//! The chain coordinator drives every step through a [`Fabric`], which hides
//! whether executors live in this process or across the network.

mod answer;

pub use answer::{extract_boxed, first_boxed, normalize_answer};

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{DEFAULT_BEACON_TIMEOUT, DEFAULT_RETRIES, DEFAULT_STEP_DEADLINE};
use crate::engine::{Engine, EngineRequest, SamplingParams};
use crate::events::{Event, EventKind, EventLog};
use crate::ledger::AgentRecord;
use crate::matching::{
    cosine_score, requirement_of, select_executor, MatchError, MatchScore, RequirementTagger,
};
use crate::prompts::PromptTemplates;
use crate::protocol::{
    now_millis, AgentId, BeaconBody, BeaconResponseBody, Slot, TaskBody, TaskResultBody,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecutionError {
    #[error("no boxed answer in engine output")]
    NoBoxedAnswer,
    #[error("no executor responded for step {subtask_index} of chain {chain_id}")]
    NoResponders { chain_id: u32, subtask_index: u32 },
    #[error("step {subtask_index} of chain {chain_id} failed: {reason}")]
    SubtaskFailed {
        chain_id: u32,
        subtask_index: u32,
        reason: String,
    },
    #[error("chain {chain_id} failed: {reason}")]
    ChainFailed { chain_id: u32, reason: String },
    #[error(transparent)]
    Matching(#[from] MatchError),
}

/// Why a dispatched Task produced no result.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("executor did not answer before the deadline")]
    Timeout,
    #[error("executor unreachable: {0}")]
    Unreachable(String),
}

/// One planner's ordered decomposition of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOfThought {
    pub chain_id: u32,
    pub background: String,
    /// Sub-task questions with their `Q<n>:` prefixes removed.
    pub subtasks: Vec<String>,
    pub planner: AgentId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedStep {
    pub subtask: String,
    pub answer: String,
    pub score: MatchScore,
    pub executor: AgentId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub chain: ChainOfThought,
    pub completed: Vec<CompletedStep>,
    pub deadline: Instant,
}

impl ChainState {
    pub fn new(chain: ChainOfThought, budget: Duration) -> Self {
        Self {
            chain,
            completed: Vec::new(),
            deadline: Instant::now() + budget,
        }
    }

    /// Index of the next sub-task, counting completed steps.
    pub fn cursor(&self) -> usize {
        self.completed.len()
    }

    pub fn context(&self) -> String {
        let pairs: Vec<(String, String)> = self
            .completed
            .iter()
            .map(|s| (s.subtask.clone(), s.answer.clone()))
            .collect();
        build_context(&self.chain.background, &pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain_id: u32,
    /// Normalized final answer, the voting key.
    pub final_answer: String,
    /// Final answer as the last executor wrote it.
    pub raw_answer: String,
    pub confidence: f64,
    pub per_step_scores: Vec<f64>,
}

impl ChainResult {
    pub fn new(chain_id: u32, raw_answer: &str, per_step_scores: Vec<f64>) -> Self {
        Self {
            chain_id,
            final_answer: normalize_answer(raw_answer),
            raw_answer: raw_answer.trim().to_string(),
            confidence: crate::protocol::mean(&per_step_scores),
            per_step_scores,
        }
    }
}

/// Background followed by each completed step as ` Q<k>: <question> Answer: $\boxed{<answer>}$`.
pub fn build_context(background: &str, prior_results: &[(String, String)]) -> String {
    let mut out = background.to_string();
    for (k, (question, answer)) in prior_results.iter().enumerate() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&format!("Q{}: {question} Answer: $\\boxed{{{answer}}}$", k + 1));
    }
    out
}

/// An executor's reply to a beacon.
pub fn beacon_response(
    capability: &[f64],
    beacon: &BeaconBody,
    load: u32,
) -> Result<BeaconResponseBody, MatchError> {
    let score = cosine_score(capability, &beacon.requirement_vector)?;
    Ok(BeaconResponseBody {
        score: score.value(),
        responder_load: load,
        responded_at: now_millis(),
    })
}

/// The coordinator's view of the network.
#[async_trait]
pub trait Fabric: Send + Sync {
    /// Executors currently available according to the local ledger, in id order.
    async fn available_executors(&self) -> Vec<AgentRecord>;

    /// Sends `beacon` to `targets` and collects responses until all have answered
    /// or `timeout` elapses.
    async fn broadcast_beacon(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)>;

    /// Sends a Task to `executor` and waits for its TaskResult.
    async fn dispatch(
        &self,
        executor: &AgentId,
        slot: &Slot,
        task: &TaskBody,
        deadline: Duration,
    ) -> Result<TaskResultBody, DispatchError>;

    async fn record_contribution(&self, executor: &AgentId);

    fn events(&self) -> &EventLog;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Highest match score wins.
    Score,
    /// Uniformly random responder; the ablation baseline.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    pub beacon_timeout: Duration,
    pub step_deadline: Duration,
    pub retries: usize,
    pub policy: SelectionPolicy,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            beacon_timeout: DEFAULT_BEACON_TIMEOUT,
            step_deadline: DEFAULT_STEP_DEADLINE,
            retries: DEFAULT_RETRIES,
            policy: SelectionPolicy::Score,
        }
    }
}

/// Deterministic per-slot seed for engine sampling and random selection.
pub(crate) fn slot_seed(seed: u64, slot: &Slot, attempt: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(slot.task_id.as_bytes());
    h.update(slot.chain_id.to_le_bytes());
    h.update(slot.subtask_index.to_le_bytes());
    h.update((attempt as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Beacons all available executors not in `exclude` and picks one. With no
/// responses, rebroadcasts once at twice the timeout before giving up.
pub async fn beacon_round(
    fabric: &dyn Fabric,
    slot: &Slot,
    beacon_template: &BeaconBody,
    exclude: &BTreeSet<AgentId>,
    timeout: Duration,
    policy: SelectionPolicy,
    attempt: usize,
) -> Result<(AgentId, MatchScore), ExecutionError> {
    for wait in [timeout, timeout * 2] {
        let targets: Vec<AgentId> = fabric
            .available_executors()
            .await
            .iter()
            .map(AgentRecord::agent_id)
            .filter(|id| !exclude.contains(id))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let mut beacon = beacon_template.clone();
        beacon.respond_by = now_millis() + wait.as_millis() as u64;
        fabric.events().record(Event::at_slot(EventKind::BeaconSent, slot));
        let mut responses = fabric.broadcast_beacon(slot, &beacon, &targets, wait).await;
        responses.retain(|(id, r)| !exclude.contains(id) && (0.0..=1.0).contains(&r.score));
        if responses.is_empty() {
            continue;
        }
        let (winner, body) = match policy {
            SelectionPolicy::Score => select_executor(&responses)?,
            SelectionPolicy::Random { seed } => {
                // Sort first so the pick does not depend on arrival order.
                responses.sort_by(|a, b| a.0.cmp(&b.0));
                let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(seed, slot, attempt));
                responses[rng.gen_range(0..responses.len())].clone()
            }
        };
        fabric
            .events()
            .record(Event::at_slot(EventKind::ExecutorSelected, slot).agent(winner));
        return Ok((winner, MatchScore::new(body.score)?));
    }
    Err(ExecutionError::NoResponders {
        chain_id: slot.chain_id,
        subtask_index: slot.subtask_index,
    })
}

/// Runs every step of `chain` in order and returns its answer and confidence.
pub async fn run_chain(
    fabric: &dyn Fabric,
    task_id: &str,
    chain: ChainOfThought,
    tagger: &dyn RequirementTagger,
    config: &ChainConfig,
) -> Result<ChainResult, ExecutionError> {
    let chain_id = chain.chain_id;
    let fail = |reason: String| ExecutionError::ChainFailed { chain_id, reason };
    if chain.subtasks.is_empty() {
        return Err(fail("chain has no sub-tasks".into()));
    }
    let mut completed: Vec<CompletedStep> = Vec::new();
    let mut last_raw = String::new();

    for (k, subtask) in chain.subtasks.iter().enumerate() {
        let slot = Slot::new(task_id, chain_id, k as u32 + 1);
        let requirement = requirement_of(subtask, tagger).await?;
        let beacon = BeaconBody {
            requirement_vector: requirement.into_inner(),
            subtask_text: subtask.clone(),
            respond_by: 0,
        };
        let mut exclude = BTreeSet::new();
        let mut outcome = None;
        let mut last_error = String::new();
        for attempt in 0..=config.retries {
            let (executor, score) = match beacon_round(
                fabric,
                &slot,
                &beacon,
                &exclude,
                config.beacon_timeout,
                config.policy,
                attempt,
            )
            .await
            {
                Ok(choice) => choice,
                Err(e) => {
                    last_error = e.to_string();
                    break;
                }
            };
            let mut scores: Vec<f64> = completed.iter().map(|s| s.score.value()).collect();
            scores.push(score.value());
            let task = TaskBody {
                subtask_text: subtask.clone(),
                background: chain.background.clone(),
                prior_results: completed
                    .iter()
                    .map(|s| (s.subtask.clone(), s.answer.clone()))
                    .collect(),
                remaining_chain: chain.subtasks[k + 1..].to_vec(),
                accumulated_scores: scores,
            };
            fabric
                .events()
                .record(Event::at_slot(EventKind::TaskSent, &slot).agent(executor));
            let result = fabric
                .dispatch(&executor, &slot, &task, config.step_deadline)
                .await;
            fabric
                .events()
                .record(Event::at_slot(EventKind::ResultRecv, &slot).agent(executor));
            match result {
                Ok(r) if !r.is_failure() => {
                    outcome = Some((executor, score, r.final_answer));
                    break;
                }
                Ok(_) => last_error = format!("executor {} returned no answer", executor.short()),
                Err(e) => last_error = format!("executor {}: {e}", executor.short()),
            }
            tracing::warn!(task_id, chain_id, step = k + 1, error = %last_error, "step attempt failed");
            exclude.insert(executor);
        }
        let Some((executor, score, answer)) = outcome else {
            return Err(fail(format!("step {}: {last_error}", k + 1)));
        };
        fabric.record_contribution(&executor).await;
        last_raw = answer.clone();
        completed.push(CompletedStep {
            subtask: subtask.clone(),
            answer,
            score,
            executor,
        });
    }

    let scores = completed.iter().map(|s| s.score.value()).collect();
    let result = ChainResult::new(chain_id, &last_raw, scores);
    fabric
        .events()
        .record(Event::new(EventKind::ChainDone, task_id).chain(chain_id));
    Ok(result)
}

/// Executor side of a Task: render the execution prompt, call the engine, and
/// extract the boxed answer, reprompting once. Returns a failure result if no
/// answer could be extracted.
pub async fn serve_subtask(
    engine: &dyn Engine,
    templates: &PromptTemplates,
    params: SamplingParams,
    slot: &Slot,
    task: &TaskBody,
    events: &EventLog,
) -> TaskResultBody {
    let context = build_context(&task.background, &task.prior_results);
    let instruction = format!("Q{}: {}", task.prior_results.len() + 1, task.subtask_text);
    let prompt = templates.execution_prompt(&context, &instruction);
    for attempt in 0..=DEFAULT_RETRIES {
        let request = EngineRequest::new(prompt.clone(), params).with_seed(slot_seed(0, slot, attempt));
        match engine.generate(&request).await {
            Ok(reply) => {
                events.record(
                    Event::at_slot(EventKind::EngineDone, slot)
                        .latency_us(reply.latency.as_micros() as u64),
                );
                match extract_boxed(&reply.text) {
                    Ok(answer) if !answer.is_empty() => {
                        return TaskResultBody::success(answer, task.accumulated_scores.clone())
                    }
                    _ => tracing::warn!(chain = slot.chain_id, step = slot.subtask_index, "no boxed answer"),
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "engine call failed");
                return TaskResultBody::failure();
            }
        }
    }
    TaskResultBody::failure()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_matches_worked_example() {
        let ctx = build_context(
            "If $23=x^4+\\frac{1}{x^4}$.",
            &[(
                "How can we express $x^4 + \\frac{1}{x^4}$ in terms of $x^2 + \\frac{1}{x^2}$?".into(),
                "(x^2 + \\frac{1}{x^2})^2 - 2".into(),
            )],
        );
        assert_eq!(
            ctx,
            "If $23=x^4+\\frac{1}{x^4}$. Q1: How can we express $x^4 + \\frac{1}{x^4}$ in terms of \
             $x^2 + \\frac{1}{x^2}$? Answer: $\\boxed{(x^2 + \\frac{1}{x^2})^2 - 2}$"
        );
    }

    #[test]
    fn context_grows_by_prefix() {
        let mut pairs = Vec::new();
        let mut prev = build_context("bg", &pairs);
        assert_eq!(prev, "bg");
        for k in 0..3 {
            pairs.push((format!("q{k}?"), format!("{k}")));
            let next = build_context("bg", &pairs);
            assert!(next.starts_with(&prev));
            prev = next;
        }
        assert!(prev.find("Q1: q0?").unwrap() < prev.find("Q2: q1?").unwrap());
    }

    #[test]
    fn chain_result_confidence_is_mean() {
        let r = ChainResult::new(0, " No. ", vec![0.8, 0.6, 1.0]);
        assert!((r.confidence - 0.8).abs() < 1e-12);
        assert_eq!(r.final_answer, "no");
        assert_eq!(r.raw_answer, "No.");
    }
}
