//! Replicated registry of agent capabilities, liveness, and contributions.
//!
//! Each node owns a [`Ledger`] state machine. Replicas converge by exchanging
//! full [`LedgerSnapshot`]s and merging them: per agent the record with the greater
//! `(last_seen, registered_at, proof)` wins, and contribution counters join by max.

mod log;

pub use log::{LedgerEvent, LedgerLog};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DEFAULT_DIMENSION, DEFAULT_LIVENESS_TTL_MS};
use crate::protocol::{to_canonical_json, AgentId, Identity, ProtocolError, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("registration proof does not verify for {0}")]
    Auth(AgentId),
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("agent {0} is not registered")]
    NotRegistered(AgentId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Planner,
    Executor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Available,
    /// Never produced by liveness classification; load is reported per beacon instead.
    Busy,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerAddress {
    pub host: String,
    pub port: u16,
}

impl PeerAddress {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for PeerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// The self-signed part of a record: everything an agent declares about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registration {
    pub agent_id: AgentId,
    pub public_key: PublicKey,
    pub address: PeerAddress,
    pub capability_vector: Vec<f64>,
    pub roles: BTreeSet<Role>,
    /// Opaque deployment details such as model path and GPU allocation.
    pub metadata: String,
    pub registered_at: u64,
}

impl Registration {
    pub fn signing_bytes(&self) -> Result<Vec<u8>, ProtocolError> {
        to_canonical_json(self)
    }

    pub fn sign(self, identity: &Identity) -> Result<AgentRecord, ProtocolError> {
        let proof = identity.sign(&self.signing_bytes()?);
        let last_seen = self.registered_at;
        Ok(AgentRecord {
            registration: self,
            proof,
            last_seen,
            contributions: 0,
        })
    }
}

/// Ledger entry for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    #[serde(flatten)]
    pub registration: Registration,
    pub proof: Signature,
    pub last_seen: u64,
    pub contributions: u64,
}

impl AgentRecord {
    pub fn agent_id(&self) -> AgentId {
        self.registration.agent_id
    }

    pub fn address(&self) -> &PeerAddress {
        &self.registration.address
    }

    pub fn capability_vector(&self) -> &[f64] {
        &self.registration.capability_vector
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.registration.roles.contains(&role)
    }

    /// Liveness classification as a pure function of `(last_seen, now, ttl)`.
    pub fn status(&self, now: u64, ttl_ms: u64) -> Status {
        if now.saturating_sub(self.last_seen) > ttl_ms {
            Status::Offline
        } else {
            Status::Available
        }
    }

    /// Checks the proof, the id/key binding, and the capability vector.
    pub fn validate(&self, dimension: usize) -> Result<(), LedgerError> {
        let reg = &self.registration;
        validate_capabilities(&reg.capability_vector, dimension)?;
        if reg.roles.is_empty() {
            return Err(LedgerError::Validation("roles must be nonempty".into()));
        }
        if reg.public_key.agent_id() != reg.agent_id {
            return Err(LedgerError::Auth(reg.agent_id));
        }
        if !reg.public_key.verify(&reg.signing_bytes()?, &self.proof)? {
            return Err(LedgerError::Auth(reg.agent_id));
        }
        Ok(())
    }

    /// Last-writer-wins order between two versions of the same agent's record.
    fn lww_key(&self) -> (u64, u64, &[u8; 64]) {
        (
            self.last_seen,
            self.registration.registered_at,
            self.proof.as_bytes(),
        )
    }
}

pub fn validate_capabilities(vector: &[f64], dimension: usize) -> Result<(), LedgerError> {
    if vector.len() != dimension {
        return Err(LedgerError::Validation(format!(
            "capability vector has dimension {}, expected {dimension}",
            vector.len()
        )));
    }
    if !vector.iter().all(|x| (0.0..=1.0).contains(x)) {
        return Err(LedgerError::Validation(
            "capability components must lie in [0,1]".into(),
        ));
    }
    if !vector.iter().any(|x| *x > 0.0) {
        return Err(LedgerError::Validation(
            "capability vector must have a positive component".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSnapshot {
    pub records: BTreeMap<AgentId, AgentRecord>,
    pub version: u64,
}

impl LedgerSnapshot {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &AgentId) -> Option<&AgentRecord> {
        self.records.get(id)
    }

    /// Records with `role` that are live at `now`, ordered by agent id.
    pub fn available_agents(&self, role: Role, now: u64, ttl_ms: u64) -> Vec<AgentRecord> {
        self.records
            .values()
            .filter(|r| r.has_role(role) && r.status(now, ttl_ms) == Status::Available)
            .cloned()
            .collect()
    }

    /// Set-equality of record contents, ignoring the local version counter.
    pub fn same_records(&self, other: &LedgerSnapshot) -> bool {
        self.records == other.records
    }
}

/// A snapshot paired with the clock reading and TTL used for liveness queries.
#[derive(Debug, Clone, Copy)]
pub struct LedgerView<'a> {
    pub snapshot: &'a LedgerSnapshot,
    pub now: u64,
    pub ttl_ms: u64,
}

impl LedgerView<'_> {
    pub fn available_agents(&self, role: Role) -> Vec<AgentRecord> {
        self.snapshot.available_agents(role, self.now, self.ttl_ms)
    }
}

/// Joins two versions of the same agent's record.
pub fn join_record(a: &AgentRecord, b: &AgentRecord) -> AgentRecord {
    let mut winner = if b.lww_key() > a.lww_key() {
        b.clone()
    } else {
        a.clone()
    };
    winner.contributions = a.contributions.max(b.contributions);
    winner
}

/// Joins two record sets. Commutative, associative, and idempotent.
pub fn join_records(
    a: &BTreeMap<AgentId, AgentRecord>,
    b: &BTreeMap<AgentId, AgentRecord>,
) -> BTreeMap<AgentId, AgentRecord> {
    let mut out = a.clone();
    for (id, rb) in b {
        out.entry(*id)
            .and_modify(|ra| *ra = join_record(ra, rb))
            .or_insert_with(|| rb.clone());
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct LedgerConfig {
    pub dimension: usize,
    pub ttl_ms: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
            ttl_ms: DEFAULT_LIVENESS_TTL_MS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MergeReport {
    pub changed: bool,
    /// Remote records skipped because they failed validation.
    pub rejected: Vec<(AgentId, String)>,
}

/// Single-writer ledger state machine.
#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    snapshot: LedgerSnapshot,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        Self {
            config,
            snapshot: LedgerSnapshot::default(),
        }
    }

    pub fn config(&self) -> LedgerConfig {
        self.config
    }

    pub fn snapshot(&self) -> &LedgerSnapshot {
        &self.snapshot
    }

    pub fn view(&self, now: u64) -> LedgerView<'_> {
        LedgerView {
            snapshot: &self.snapshot,
            now,
            ttl_ms: self.config.ttl_ms,
        }
    }

    /// Inserts or replaces a self-signed record.
    pub fn register(&mut self, record: AgentRecord) -> Result<&LedgerSnapshot, LedgerError> {
        record.validate(self.config.dimension)?;
        let id = record.agent_id();
        let merged = match self.snapshot.records.get(&id) {
            Some(old) => AgentRecord {
                last_seen: old.last_seen.max(record.last_seen),
                contributions: old.contributions.max(record.contributions),
                ..record
            },
            None => record,
        };
        self.snapshot.records.insert(id, merged);
        self.bump();
        Ok(&self.snapshot)
    }

    /// Advances `last_seen` monotonically. Returns whether anything changed.
    pub fn heartbeat(&mut self, agent_id: &AgentId, sent_at: u64) -> Result<bool, LedgerError> {
        let rec = self
            .snapshot
            .records
            .get_mut(agent_id)
            .ok_or(LedgerError::NotRegistered(*agent_id))?;
        if sent_at > rec.last_seen {
            rec.last_seen = sent_at;
            self.bump();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn available_agents(&self, role: Role, now: u64) -> Vec<AgentRecord> {
        self.view(now).available_agents(role)
    }

    pub fn record_contribution(&mut self, agent_id: &AgentId) -> Result<u64, LedgerError> {
        let rec = self
            .snapshot
            .records
            .get_mut(agent_id)
            .ok_or(LedgerError::NotRegistered(*agent_id))?;
        rec.contributions += 1;
        let n = rec.contributions;
        self.bump();
        Ok(n)
    }

    /// Merges a remote snapshot. Invalid remote records are skipped and reported.
    pub fn merge(&mut self, remote: &LedgerSnapshot) -> MergeReport {
        let mut report = MergeReport::default();
        let mut accepted = BTreeMap::new();
        for (id, rec) in &remote.records {
            if *id != rec.agent_id() {
                report.rejected.push((*id, "record keyed under a foreign id".into()));
                continue;
            }
            // Skip the signature check when we already hold an identical claim.
            let known = self
                .snapshot
                .records
                .get(id)
                .is_some_and(|local| local.registration == rec.registration && local.proof == rec.proof);
            if !known {
                if let Err(e) = rec.validate(self.config.dimension) {
                    tracing::warn!(agent = %id.short(), error = %e, "rejected remote ledger record");
                    report.rejected.push((*id, e.to_string()));
                    continue;
                }
            }
            accepted.insert(*id, rec.clone());
        }
        let joined = join_records(&self.snapshot.records, &accepted);
        if joined != self.snapshot.records {
            self.snapshot.records = joined;
            self.bump();
            report.changed = true;
        }
        report
    }

    fn bump(&mut self) {
        self.snapshot.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const D: usize = 8;

    fn cfg() -> LedgerConfig {
        LedgerConfig {
            dimension: D,
            ttl_ms: 10_000,
        }
    }

    fn record(seed: u8, port: u16, at: u64, roles: &[Role]) -> AgentRecord {
        let identity = Identity::from_seed([seed; 32]);
        let mut cap = vec![0.0; D];
        cap[seed as usize % D] = 1.0;
        Registration {
            agent_id: identity.agent_id(),
            public_key: identity.public_key(),
            address: PeerAddress::new("127.0.0.1", port),
            capability_vector: cap,
            roles: roles.iter().copied().collect(),
            metadata: String::new(),
            registered_at: at,
        }
        .sign(&identity)
        .unwrap()
    }

    #[test]
    fn register_fresh_agent() {
        let mut ledger = Ledger::new(cfg());
        let snap = ledger.register(record(1, 9000, 100, &[Role::Executor])).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap.version, 1);
    }

    #[test]
    fn reregister_replaces_record() {
        let mut ledger = Ledger::new(cfg());
        ledger.register(record(1, 9000, 100, &[Role::Executor])).unwrap();
        let snap = ledger.register(record(1, 9100, 200, &[Role::Executor])).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap.version, 2);
        let id = Identity::from_seed([1; 32]).agent_id();
        assert_eq!(snap.get(&id).unwrap().address().port, 9100);
    }

    #[test]
    fn wrong_dimension_is_validation_error() {
        let identity = Identity::from_seed([3; 32]);
        let rec = Registration {
            agent_id: identity.agent_id(),
            public_key: identity.public_key(),
            address: PeerAddress::new("h", 1),
            capability_vector: vec![0.5; D + 1],
            roles: [Role::Planner].into_iter().collect(),
            metadata: String::new(),
            registered_at: 0,
        }
        .sign(&identity)
        .unwrap();
        let mut ledger = Ledger::new(cfg());
        assert!(matches!(ledger.register(rec), Err(LedgerError::Validation(_))));
    }

    #[test]
    fn forged_proof_is_auth_error() {
        let mut rec = record(4, 1, 0, &[Role::Planner]);
        rec.registration.address.port = 2;
        let mut ledger = Ledger::new(cfg());
        assert!(matches!(ledger.register(rec), Err(LedgerError::Auth(_))));
        assert!(ledger.snapshot().is_empty());
    }

    #[test]
    fn heartbeat_liveness_and_monotonicity() {
        let mut ledger = Ledger::new(cfg());
        let rec = record(1, 9000, 1_000, &[Role::Executor]);
        let id = rec.agent_id();
        ledger.register(rec).unwrap();

        assert!(ledger.heartbeat(&id, 5_000).unwrap());
        assert_eq!(ledger.available_agents(Role::Executor, 6_000).len(), 1);
        assert_eq!(ledger.available_agents(Role::Executor, 15_001).len(), 0);

        assert!(!ledger.heartbeat(&id, 4_000).unwrap());
        assert_eq!(ledger.snapshot().get(&id).unwrap().last_seen, 5_000);

        let stranger = Identity::from_seed([99; 32]).agent_id();
        assert_eq!(
            ledger.heartbeat(&stranger, 1),
            Err(LedgerError::NotRegistered(stranger))
        );
    }

    #[test]
    fn available_agents_filters_expired_and_role() {
        let mut ledger = Ledger::new(cfg());
        ledger.register(record(1, 1, 10_000, &[Role::Executor])).unwrap();
        ledger.register(record(2, 2, 10_000, &[Role::Executor])).unwrap();
        ledger.register(record(3, 3, 0, &[Role::Executor])).unwrap();
        ledger.register(record(4, 4, 10_000, &[Role::Planner])).unwrap();
        let got = ledger.available_agents(Role::Executor, 12_000);
        assert_eq!(got.len(), 2);
        assert!(got.windows(2).all(|w| w[0].agent_id() < w[1].agent_id()));
        assert!(Ledger::new(cfg()).available_agents(Role::Planner, 0).is_empty());
    }

    #[test]
    fn eight_agents_five_planners_in_id_order() {
        let mut ledger = Ledger::new(cfg());
        let planner_seeds = [10u8, 11, 13, 15, 16];
        for seed in 10u8..18 {
            let roles: &[Role] = if planner_seeds.contains(&seed) {
                &[Role::Planner, Role::Executor]
            } else {
                &[Role::Executor]
            };
            ledger.register(record(seed, seed as u16, 1_000, roles)).unwrap();
        }
        // Expected list enumerated independently: hash each planner key and sort.
        let mut expected: Vec<AgentId> = planner_seeds
            .iter()
            .map(|s| Identity::from_seed([*s; 32]).agent_id())
            .collect();
        expected.sort();
        let got: Vec<AgentId> = ledger
            .available_agents(Role::Planner, 2_000)
            .iter()
            .map(|r| r.agent_id())
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn contributions_count_and_unknown() {
        let mut ledger = Ledger::new(cfg());
        let a = record(1, 1, 0, &[Role::Executor]);
        let b = record(2, 2, 0, &[Role::Executor]);
        let (ida, idb) = (a.agent_id(), b.agent_id());
        ledger.register(a).unwrap();
        ledger.register(b).unwrap();
        assert_eq!(ledger.record_contribution(&ida).unwrap(), 1);
        for id in [ida, idb, idb] {
            ledger.record_contribution(&id).unwrap();
        }
        let total: u64 = ledger.snapshot().records.values().map(|r| r.contributions).sum();
        assert_eq!(total, 4);
        let ghost = Identity::from_seed([77; 32]).agent_id();
        assert_eq!(
            ledger.record_contribution(&ghost),
            Err(LedgerError::NotRegistered(ghost))
        );
    }

    #[test]
    fn merge_idempotent_commutative_union() {
        let mut a = Ledger::new(cfg());
        a.register(record(1, 1, 0, &[Role::Executor])).unwrap();
        let mut b = Ledger::new(cfg());
        b.register(record(2, 2, 0, &[Role::Planner])).unwrap();

        let before = a.snapshot().clone();
        let report = a.merge(&before);
        assert!(!report.changed);
        assert_eq!(a.snapshot(), &before);

        let (sa, sb) = (a.snapshot().clone(), b.snapshot().clone());
        a.merge(&sb);
        b.merge(&sa);
        assert_eq!(a.snapshot().len(), 2);
        assert!(a.snapshot().same_records(b.snapshot()));
    }

    #[test]
    fn merge_skips_forged_records() {
        let mut remote = LedgerSnapshot::default();
        let good = record(1, 1, 0, &[Role::Executor]);
        let mut forged = record(2, 2, 0, &[Role::Executor]);
        forged.registration.capability_vector[0] = 0.25;
        remote.records.insert(good.agent_id(), good.clone());
        remote.records.insert(forged.agent_id(), forged.clone());

        let mut local = Ledger::new(cfg());
        let report = local.merge(&remote);
        assert!(report.changed);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].0, forged.agent_id());
        assert!(local.snapshot().get(&forged.agent_id()).is_none());
        assert!(local.snapshot().get(&good.agent_id()).is_some());
    }

    #[test]
    fn merge_prefers_newer_and_maxes_contributions() {
        let old = AgentRecord {
            contributions: 7,
            ..record(1, 1, 100, &[Role::Executor])
        };
        let new = record(1, 2, 200, &[Role::Executor]);
        let j = join_record(&old, &new);
        assert_eq!(j.address().port, 2);
        assert_eq!(j.contributions, 7);
        assert_eq!(join_record(&new, &old), j);
    }
}
