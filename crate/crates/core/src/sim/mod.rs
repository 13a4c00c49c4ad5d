//! In-process network of agents for simulation, ablations, and tests.
//!
//! [`LocalCluster`] implements both [`Fabric`] and [`PlannerPool`] by calling each
//! agent's engine directly, so the orchestration code paths are the same ones a
//! networked node runs, minus the transport.

mod case_study;
mod corpus;

pub use case_study::{case_study, CaseAgent, CaseStudy, TableTagger, CASE_STUDY_TEXT};
pub use corpus::{
    generate_agents, generate_tasks, read_corpus, write_corpus, CorpusParams, SimAgentSpec,
    SyntheticTask, AGENTS_FILE, TASKS_FILE,
};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DEFAULT_BEACON_TIMEOUT, DEFAULT_TASK_DEADLINE};
use crate::engine::{Engine, ScriptedEngine, SyntheticEngine};
use crate::events::{Event, EventKind, EventLog};
use crate::execution::{
    beacon_response, run_chain, serve_subtask, ChainConfig, ChainOfThought, ChainResult,
    DispatchError, ExecutionError, SelectionPolicy,
};
use crate::ledger::{AgentRecord, Ledger, LedgerConfig, PeerAddress, Registration, Role};
use crate::matching::{KeywordTagger, RequirementTagger, Taxonomy};
use crate::planning::{
    plan_chain, plan_fanout, PlannerDirectory, PlannerPool, PlannerSettings, PlanningError,
    TaskDescription,
};
use crate::protocol::{
    now_millis, AgentId, BeaconBody, BeaconResponseBody, Identity, Slot, TaskBody, TaskResultBody,
};
use crate::voting::{vote, vote_unweighted, Verdict, VoteError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Planning(#[from] PlanningError),
    #[error("{source}; chain failures: {}", failures.join("; "))]
    Vote { source: VoteError, failures: Vec<String> },
    #[error("invalid agent: {0}")]
    Agent(String),
}

pub struct LocalAgent {
    pub identity: Identity,
    pub record: AgentRecord,
    pub engine: Arc<dyn Engine>,
}

impl LocalAgent {
    pub fn new(
        identity: Identity,
        roles: BTreeSet<Role>,
        capability: Vec<f64>,
        engine: Arc<dyn Engine>,
    ) -> Result<Self, SimError> {
        let record = Registration {
            agent_id: identity.agent_id(),
            public_key: identity.public_key(),
            address: PeerAddress::new("local", 1),
            capability_vector: capability,
            roles,
            metadata: format!("engine={}", engine.id()),
            registered_at: now_millis(),
        }
        .sign(&identity)
        .map_err(|e| SimError::Agent(e.to_string()))?;
        Ok(Self {
            identity,
            record,
            engine,
        })
    }

    pub fn id(&self) -> AgentId {
        self.identity.agent_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub chains: usize,
    pub weighted: bool,
    pub chain: ChainConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            chains: crate::config::DEFAULT_CHAINS,
            weighted: true,
            chain: ChainConfig::default(),
        }
    }
}

/// A task's verdict with the chain results that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub verdict: Verdict,
    pub chains: Vec<ChainResult>,
    pub failures: Vec<String>,
}

pub struct LocalCluster {
    agents: BTreeMap<AgentId, LocalAgent>,
    down: Mutex<BTreeSet<AgentId>>,
    ledger: Mutex<Ledger>,
    events: EventLog,
    tagger: Arc<dyn RequirementTagger>,
    taxonomy: Arc<Taxonomy>,
    settings: PlannerSettings,
}

impl LocalCluster {
    pub fn new(agents: Vec<LocalAgent>, taxonomy: Arc<Taxonomy>) -> Result<Self, SimError> {
        let mut ledger = Ledger::new(LedgerConfig {
            dimension: taxonomy.dimension(),
            ttl_ms: u64::MAX / 4,
        });
        for a in &agents {
            ledger
                .register(a.record.clone())
                .map_err(|e| SimError::Agent(e.to_string()))?;
        }
        Ok(Self {
            agents: agents.into_iter().map(|a| (a.id(), a)).collect(),
            down: Mutex::new(BTreeSet::new()),
            ledger: Mutex::new(ledger),
            events: EventLog::new(),
            tagger: Arc::new(KeywordTagger::new(taxonomy.clone())),
            taxonomy,
            settings: PlannerSettings::default(),
        })
    }

    /// A cluster of scripted agents reproducing the coffee-shop case study.
    pub fn case_study(study: &CaseStudy) -> Result<Self, SimError> {
        let agents = study
            .agents
            .iter()
            .map(|a| {
                let engine: Arc<dyn Engine> = Arc::new(ScriptedEngine::new(
                    format!("scripted-{}", a.key_seed),
                    a.behavior.clone(),
                ));
                LocalAgent::new(
                    Identity::from_seed([a.key_seed; 32]),
                    a.roles.clone(),
                    a.capability.clone(),
                    engine,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(agents, Arc::new(Taxonomy::default_taxonomy()))?
            .with_tagger(Arc::new(study.tagger())))
    }

    /// A cluster of synthetic agents built from specs.
    pub fn synthetic(specs: &[SimAgentSpec], taxonomy: Arc<Taxonomy>) -> Result<Self, SimError> {
        let agents = specs
            .iter()
            .map(|s| {
                let engine: Arc<dyn Engine> =
                    Arc::new(SyntheticEngine::new(&s.name, s.profile.clone(), taxonomy.clone()));
                LocalAgent::new(
                    Identity::from_seed([s.key_seed; 32]),
                    s.roles.clone(),
                    s.capability.clone(),
                    engine,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(agents, taxonomy)
    }

    pub fn with_tagger(mut self, tagger: Arc<dyn RequirementTagger>) -> Self {
        self.tagger = tagger;
        self
    }

    pub fn with_settings(mut self, settings: PlannerSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.keys().copied().collect()
    }

    /// Crashed agents stop answering beacons and tasks.
    pub fn crash(&self, id: &AgentId) {
        self.down.lock().unwrap().insert(*id);
    }

    fn is_up(&self, id: &AgentId) -> bool {
        !self.down.lock().unwrap().contains(id)
    }

    pub fn ledger(&self) -> Ledger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn event_log(&self) -> &EventLog {
        &self.events
    }

    /// Plans, executes every chain concurrently, and votes.
    pub async fn run_task(
        &self,
        task: &TaskDescription,
        options: &RunOptions,
    ) -> Result<TaskOutcome, SimError> {
        self.events
            .record(Event::new(EventKind::TaskSubmitted, &task.task_id));
        let chains = plan_fanout(
            self,
            task,
            &self.taxonomy.planning_requirement(),
            options.chains,
            options.chain.beacon_timeout,
            DEFAULT_TASK_DEADLINE,
        )
        .await?;
        let runs = chains.into_iter().map(|chain| {
            run_chain(self, &task.task_id, chain, self.tagger.as_ref(), &options.chain)
        });
        let mut results = Vec::new();
        let mut failures = Vec::new();
        for r in join_all(runs).await {
            match r {
                Ok(c) => results.push(c),
                Err(e) => failures.push(e.to_string()),
            }
        }
        let verdict = if options.weighted {
            vote(&results)
        } else {
            vote_unweighted(&results)
        }
        .map_err(|source| SimError::Vote {
            source,
            failures: failures.clone(),
        })?;
        self.events.record(Event::new(EventKind::Verdict, &task.task_id));
        Ok(TaskOutcome {
            verdict,
            chains: results,
            failures,
        })
    }

    pub async fn run_chain(
        &self,
        task_id: &str,
        chain: ChainOfThought,
        config: &ChainConfig,
    ) -> Result<ChainResult, ExecutionError> {
        run_chain(self, task_id, chain, self.tagger.as_ref(), config).await
    }
}

#[async_trait]
impl crate::execution::Fabric for LocalCluster {
    async fn available_executors(&self) -> Vec<AgentRecord> {
        self.ledger.lock().unwrap().available_agents(Role::Executor, now_millis())
    }

    async fn broadcast_beacon(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        _timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)> {
        let mut out = Vec::new();
        for id in targets {
            let Some(agent) = self.agents.get(id).filter(|_| self.is_up(id)) else {
                continue;
            };
            if let Ok(r) = beacon_response(agent.record.capability_vector(), beacon, 0) {
                self.events
                    .record(Event::at_slot(EventKind::ResponseRecv, slot).agent(*id));
                out.push((*id, r));
            }
        }
        out
    }

    async fn dispatch(
        &self,
        executor: &AgentId,
        slot: &Slot,
        task: &TaskBody,
        _deadline: Duration,
    ) -> Result<TaskResultBody, DispatchError> {
        let agent = self
            .agents
            .get(executor)
            .filter(|_| self.is_up(executor))
            .ok_or_else(|| DispatchError::Unreachable(executor.short()))?;
        Ok(serve_subtask(
            agent.engine.as_ref(),
            &self.settings.templates,
            self.settings.params,
            slot,
            task,
            &self.events,
        )
        .await)
    }

    async fn record_contribution(&self, executor: &AgentId) {
        let _ = self.ledger.lock().unwrap().record_contribution(executor);
    }

    fn events(&self) -> &EventLog {
        &self.events
    }
}

#[async_trait]
impl PlannerDirectory for LocalCluster {
    async fn available_planners(&self) -> Vec<AgentRecord> {
        self.ledger.lock().unwrap().available_agents(Role::Planner, now_millis())
    }

    async fn solicit(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)> {
        crate::execution::Fabric::broadcast_beacon(self, slot, beacon, targets, timeout).await
    }

    fn events(&self) -> &EventLog {
        &self.events
    }
}

#[async_trait]
impl PlannerPool for LocalCluster {

    async fn plan(
        &self,
        planner: &AgentId,
        chain_id: u32,
        task: &TaskDescription,
    ) -> Result<ChainOfThought, PlanningError> {
        let agent = self
            .agents
            .get(planner)
            .filter(|_| self.is_up(planner))
            .ok_or_else(|| PlanningError::PlanningFailed {
                chain_id,
                reason: format!("planner {} unreachable", planner.short()),
            })?;
        plan_chain(task, agent.engine.as_ref(), &self.settings, chain_id, *planner, &self.events).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Score,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub chains: usize,
    pub weighted: bool,
    pub tasks: usize,
    pub correct: usize,
    pub failed: usize,
    pub accuracy: f64,
}

/// Accuracy of the cluster on `tasks` under one configuration. `seed` drives
/// random selection only.
pub async fn run_bench(
    tasks: &[SyntheticTask],
    specs: &[SimAgentSpec],
    taxonomy: Arc<Taxonomy>,
    mode: BenchMode,
    chains: usize,
    weighted: bool,
    seed: u64,
) -> Result<BenchReport, SimError> {
    let cluster = LocalCluster::synthetic(specs, taxonomy)?;
    let policy = match mode {
        BenchMode::Score => SelectionPolicy::Score,
        BenchMode::Random => SelectionPolicy::Random { seed },
    };
    let options = RunOptions {
        chains,
        weighted,
        chain: ChainConfig {
            beacon_timeout: DEFAULT_BEACON_TIMEOUT,
            policy,
            ..ChainConfig::default()
        },
    };
    let (mut correct, mut failed) = (0, 0);
    for task in tasks {
        match cluster.run_task(&task.description(), &options).await {
            Ok(outcome) => {
                if outcome.verdict.answer == crate::execution::normalize_answer(&task.answer) {
                    correct += 1;
                }
            }
            Err(e) => {
                tracing::debug!(task = %task.task_id, error = %e, "bench task failed");
                failed += 1;
            }
        }
    }
    Ok(BenchReport {
        mode,
        chains,
        weighted,
        tasks: tasks.len(),
        correct,
        failed,
        accuracy: if tasks.is_empty() {
            0.0
        } else {
            correct as f64 / tasks.len() as f64
        },
    })
}
