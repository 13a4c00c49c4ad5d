//! Several full nodes in one process over an in-memory network, for tests,
//! demos, and the acceptance suite.

use std::sync::Arc;
use std::time::Duration;

use agora_core::engine::EngineConfig;
use agora_core::events::EventLog;
use agora_core::ledger::PeerAddress;
use agora_core::matching::RequirementTagger;
use agora_core::sim::CaseStudy;

use crate::config::{NodeConfig, Timing};
use crate::node::{start_node_with, NodeEnv, NodeHandle, StartupError};
use crate::transport::MemoryNetwork;

/// Timing suited to in-process clusters: fast gossip, short liveness.
pub fn fast_timing() -> Timing {
    Timing {
        heartbeat_interval_ms: 200,
        sync_interval_ms: 250,
        liveness_ttl_ms: 1_500,
        beacon_timeout_ms: 500,
        step_deadline_ms: 5_000,
        task_deadline_ms: 20_000,
        connect_timeout_ms: 500,
    }
}

pub fn memory_address(i: usize) -> PeerAddress {
    PeerAddress::new(format!("node{i}"), 7000)
}

pub struct Cluster {
    network: MemoryNetwork,
    events: EventLog,
    nodes: Vec<Option<NodeHandle>>,
}

impl Cluster {
    /// Starts one node per config. Every node after the first uses the first as
    /// its seed; all share one event log so overhead reports see the whole run.
    pub async fn start(
        configs: Vec<NodeConfig>,
        tagger: Option<Arc<dyn RequirementTagger>>,
    ) -> Result<Self, StartupError> {
        let network = MemoryNetwork::new();
        let events = EventLog::new();
        let mut nodes = Vec::with_capacity(configs.len());
        let seed = configs.first().map(|c| c.listen.clone());
        for (i, mut config) in configs.into_iter().enumerate() {
            if i > 0 {
                config.seeds.extend(seed.clone());
            }
            let mut env = NodeEnv::memory(&network).with_events(events.clone());
            if let Some(t) = &tagger {
                env = env.with_tagger(t.clone());
            }
            nodes.push(Some(start_node_with(config, env).await?));
        }
        Ok(Self {
            network,
            events,
            nodes,
        })
    }

    /// Configs for the case-study agents, each on its own in-memory address.
    pub fn case_study_configs(study: &CaseStudy, timing: Timing) -> Vec<NodeConfig> {
        study
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut c = NodeConfig::new(
                    memory_address(i),
                    a.roles.iter().copied(),
                    a.capability.clone(),
                    EngineConfig::Scripted {
                        behavior: Some(a.behavior.clone()),
                        behavior_path: None,
                    },
                );
                c.identity_seed = Some(hex::encode([a.key_seed; 32]));
                c.timing = timing;
                c
            })
            .collect()
    }

    pub async fn case_study(study: &CaseStudy, timing: Timing) -> Result<Self, StartupError> {
        let tagger: Arc<dyn RequirementTagger> = Arc::new(study.tagger());
        Self::start(Self::case_study_configs(study, timing), Some(tagger)).await
    }

    pub fn network(&self) -> &MemoryNetwork {
        &self.network
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The i-th node, unless it was killed.
    pub fn node(&self, i: usize) -> Option<&NodeHandle> {
        self.nodes.get(i).and_then(|n| n.as_ref())
    }

    pub fn live(&self) -> impl Iterator<Item = &NodeHandle> {
        self.nodes.iter().flatten()
    }

    /// Removes node `i` from the cluster without stopping it.
    pub fn take(&mut self, i: usize) -> Option<NodeHandle> {
        self.nodes.get_mut(i).and_then(Option::take)
    }

    /// Stops node `i` abruptly, as a crash would: no goodbye, connections drop.
    pub async fn kill(&mut self, i: usize) {
        if let Some(node) = self.nodes.get_mut(i).and_then(Option::take) {
            node.shutdown().await;
        }
    }

    /// Waits until every live node's ledger holds every live node's record.
    pub async fn wait_converged(&self, timeout: Duration) -> bool {
        let ids: Vec<_> = self.live().map(|n| n.agent_id()).collect();
        let all = futures::future::join_all(self.live().map(|n| {
            let ids = ids.clone();
            n.wait_for_ledger(move |s| ids.iter().all(|id| s.get(id).is_some()))
        }));
        tokio::time::timeout(timeout, all).await.is_ok()
    }

    pub async fn shutdown(self) {
        for node in self.nodes.into_iter().flatten() {
            node.shutdown().await;
        }
    }
}
