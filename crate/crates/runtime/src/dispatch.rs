//! Routing of verified envelopes to one handler per message type.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};

use agora_core::protocol::{now_millis, AgentId, Envelope, MsgType, Slot};
use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::node::NodeInner;

#[async_trait]
pub trait Handler: Send + Sync {
    /// Must return promptly; long work is spawned by the handler itself.
    async fn handle(&self, node: &Arc<NodeInner>, envelope: Envelope);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchOutcome {
    Handled,
    Duplicate,
    Rejected(String),
}

/// Why a message was dropped before reaching a handler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at_ms: u64,
    pub sender: Option<String>,
    pub msg_type: Option<String>,
    pub task_id: Option<String>,
    pub reason: String,
}

const AUDIT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    entries: Arc<Mutex<VecDeque<AuditEntry>>>,
}

impl AuditLog {
    pub fn record(&self, sender: Option<AgentId>, envelope: Option<&Envelope>, reason: impl Into<String>) {
        let entry = AuditEntry {
            at_ms: now_millis(),
            sender: sender.map(|s| s.to_hex()),
            msg_type: envelope.map(|e| e.msg_type().as_str().to_string()),
            task_id: envelope.map(|e| e.slot.task_id.clone()),
            reason: reason.into(),
        };
        tracing::warn!(sender = ?entry.sender, msg_type = ?entry.msg_type, reason = %entry.reason, "dropped message");
        let mut q = self.entries.lock().unwrap();
        if q.len() == AUDIT_CAPACITY {
            q.pop_front();
        }
        q.push_back(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().unwrap().iter().cloned().collect()
    }
}

/// Stateful messages (Task, TaskResult) are deduplicated by slot, type, and
/// sender, so at most one of each is ever applied. Beacons and their responses
/// are stateless, and a coordinator may re-beacon the same slot, so only exact
/// replays (same signature) are dropped for them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DedupKey {
    Slot(Slot, MsgType, AgentId),
    Exact([u8; 64]),
}

fn dedup_key(e: &Envelope) -> DedupKey {
    match e.msg_type() {
        MsgType::Task | MsgType::TaskResult => DedupKey::Slot(e.slot.clone(), e.msg_type(), e.sender),
        MsgType::Beacon | MsgType::BeaconResponse => DedupKey::Exact(*e.signature.as_bytes()),
    }
}

const DEDUP_CAPACITY: usize = 100_000;

#[derive(Debug, Default)]
struct Seen {
    set: HashSet<DedupKey>,
    order: VecDeque<DedupKey>,
}

impl Seen {
    /// Returns false if the key was already present.
    fn insert(&mut self, key: DedupKey) -> bool {
        if !self.set.insert(key.clone()) {
            return false;
        }
        self.order.push_back(key);
        if self.order.len() > DEDUP_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        true
    }
}

pub struct DispatchTable {
    handlers: BTreeMap<MsgType, Arc<dyn Handler>>,
    seen: Mutex<Seen>,
}

impl DispatchTable {
    /// Fails unless exactly the four protocol message types are bound.
    pub fn new(handlers: Vec<(MsgType, Arc<dyn Handler>)>) -> Result<Self, String> {
        let map: BTreeMap<_, _> = handlers.into_iter().collect();
        let all = [MsgType::Beacon, MsgType::BeaconResponse, MsgType::Task, MsgType::TaskResult];
        if map.len() != all.len() || !all.iter().all(|t| map.contains_key(t)) {
            return Err(format!("expected handlers for {all:?}, got {:?}", map.keys().collect::<Vec<_>>()));
        }
        Ok(Self {
            handlers: map,
            seen: Mutex::new(Seen::default()),
        })
    }

    pub fn standard() -> Self {
        Self::new(crate::node::handlers()).expect("standard table is complete")
    }

    pub fn bound_types(&self) -> Vec<MsgType> {
        self.handlers.keys().copied().collect()
    }

    /// Verifies, deduplicates, and routes one envelope.
    pub async fn dispatch(&self, node: &Arc<NodeInner>, envelope: Envelope) -> DispatchOutcome {
        let Some(record) = node.ledger().get(&envelope.sender) else {
            node.audit().record(Some(envelope.sender), Some(&envelope), "unknown sender");
            return DispatchOutcome::Rejected("unknown sender".into());
        };
        match envelope.verify(&record.registration.public_key) {
            Ok(true) => {}
            Ok(false) | Err(_) => {
                node.audit().record(Some(envelope.sender), Some(&envelope), "signature does not verify");
                return DispatchOutcome::Rejected("bad signature".into());
            }
        }
        if !self.seen.lock().unwrap().insert(dedup_key(&envelope)) {
            tracing::debug!(sender = %envelope.sender.short(), msg_type = envelope.msg_type().as_str(), "duplicate dropped");
            return DispatchOutcome::Duplicate;
        }
        let handler = self.handlers[&envelope.msg_type()].clone();
        handler.handle(node, envelope).await;
        DispatchOutcome::Handled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Nop;

    #[async_trait]
    impl Handler for Nop {
        async fn handle(&self, _: &Arc<NodeInner>, _: Envelope) {}
    }

    #[test]
    fn table_requires_all_four_handlers() {
        let h = || -> Arc<dyn Handler> { Arc::new(Nop) };
        assert!(DispatchTable::new(vec![(MsgType::Beacon, h())]).is_err());
        let full = vec![
            (MsgType::Beacon, h()),
            (MsgType::BeaconResponse, h()),
            (MsgType::Task, h()),
            (MsgType::TaskResult, h()),
        ];
        assert_eq!(DispatchTable::new(full).unwrap().bound_types().len(), 4);
        assert_eq!(DispatchTable::standard().bound_types().len(), 4);
    }

    #[test]
    fn seen_set_is_bounded() {
        let mut s = Seen::default();
        for i in 0..(DEDUP_CAPACITY + 10) {
            let mut b = [0u8; 64];
            b[..8].copy_from_slice(&(i as u64).to_be_bytes());
            assert!(s.insert(DedupKey::Exact(b)));
        }
        assert_eq!(s.set.len(), DEDUP_CAPACITY);
        let mut first = [0u8; 64];
        first[..8].copy_from_slice(&0u64.to_be_bytes());
        assert!(s.insert(DedupKey::Exact(first)));
    }
}
