//! The node's single ledger writer. Mutations are messages to one task; readers
//! take the latest published snapshot without waiting on it.

use std::sync::Arc;

use agora_core::ledger::{
    AgentRecord, Ledger, LedgerConfig, LedgerError, LedgerEvent, LedgerLog, LedgerSnapshot,
    MergeReport, Role,
};
use agora_core::protocol::{now_millis, AgentId};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

enum Command {
    Register(AgentRecord, oneshot::Sender<Result<(), LedgerError>>),
    Heartbeat(AgentId, u64),
    Merge(LedgerSnapshot, oneshot::Sender<MergeReport>),
    Contribution(AgentId),
}

fn publish_if_changed(ledger: &Ledger, before: u64, publish: &watch::Sender<Arc<LedgerSnapshot>>) {
    if ledger.snapshot().version != before && publish.borrow().version != ledger.snapshot().version {
        publish.send_replace(Arc::new(ledger.snapshot().clone()));
    }
}

#[derive(Clone)]
pub struct LedgerHandle {
    tx: mpsc::UnboundedSender<Command>,
    latest: watch::Receiver<Arc<LedgerSnapshot>>,
    config: LedgerConfig,
}

impl LedgerHandle {
    /// Spawns the writer. Events are appended to `log` when one is given.
    pub fn spawn(ledger: Ledger, mut log: Option<LedgerLog>) -> (Self, JoinHandle<()>) {
        let config = ledger.config();
        let (tx, mut rx) = mpsc::unbounded_channel();
        let (publish, latest) = watch::channel(Arc::new(ledger.snapshot().clone()));
        let task = tokio::spawn(async move {
            let mut ledger = ledger;
            let mut persist = |event: LedgerEvent| {
                if let Some(log) = log.as_mut() {
                    if let Err(e) = log.append(&event) {
                        tracing::warn!(error = %e, "ledger log append failed");
                    }
                }
            };
            while let Some(cmd) = rx.recv().await {
                let before = ledger.snapshot().version;
                match cmd {
                    Command::Register(record, reply) => {
                        let result = ledger.register(record.clone()).map(|_| ());
                        if result.is_ok() {
                            persist(LedgerEvent::Register { record });
                        }
                        // Publish before replying so the caller sees its own write.
                        publish_if_changed(&ledger, before, &publish);
                        let _ = reply.send(result);
                    }
                    Command::Heartbeat(id, at) => {
                        if let Ok(true) = ledger.heartbeat(&id, at) {
                            persist(LedgerEvent::Heartbeat { agent_id: id, sent_at: at });
                        }
                    }
                    Command::Merge(remote, reply) => {
                        let report = ledger.merge(&remote);
                        if report.changed {
                            for id in remote.records.keys() {
                                if let Some(r) = ledger.snapshot().get(id) {
                                    persist(LedgerEvent::Register { record: r.clone() });
                                }
                            }
                        }
                        publish_if_changed(&ledger, before, &publish);
                        let _ = reply.send(report);
                    }
                    Command::Contribution(id) => {
                        if let Err(e) = ledger.record_contribution(&id) {
                            tracing::warn!(error = %e, "contribution for unknown agent");
                        }
                    }
                }
                publish_if_changed(&ledger, before, &publish);
            }
        });
        (Self { tx, latest, config }, task)
    }

    pub fn config(&self) -> LedgerConfig {
        self.config
    }

    pub fn snapshot(&self) -> Arc<LedgerSnapshot> {
        self.latest.borrow().clone()
    }

    pub fn get(&self, id: &AgentId) -> Option<AgentRecord> {
        self.latest.borrow().get(id).cloned()
    }

    pub fn available(&self, role: Role) -> Vec<AgentRecord> {
        self.latest
            .borrow()
            .available_agents(role, now_millis(), self.config.ttl_ms)
    }

    pub async fn register(&self, record: AgentRecord) -> Result<(), LedgerError> {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Command::Register(record, tx))
            .map_err(|_| LedgerError::Validation("ledger writer stopped".into()))?;
        rx.await.map_err(|_| LedgerError::Validation("ledger writer stopped".into()))?
    }

    pub fn heartbeat(&self, id: AgentId, sent_at: u64) {
        let _ = self.tx.send(Command::Heartbeat(id, sent_at));
    }

    pub async fn merge(&self, remote: LedgerSnapshot) -> Option<MergeReport> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Command::Merge(remote, tx)).ok()?;
        rx.await.ok()
    }

    pub fn record_contribution(&self, id: AgentId) {
        let _ = self.tx.send(Command::Contribution(id));
    }

    /// Resolves once the published snapshot satisfies `pred`.
    pub async fn wait_for(&self, mut pred: impl FnMut(&LedgerSnapshot) -> bool) {
        let mut rx = self.latest.clone();
        let _ = rx.wait_for(|s| pred(s)).await;
    }
}
