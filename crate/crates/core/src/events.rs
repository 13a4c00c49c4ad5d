//! Structured event log and orchestration overhead accounting.
//!
//! Timestamps come from one process-wide monotonic clock in microseconds, so
//! events recorded by several in-process nodes share a time base.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{to_canonical_json, AgentId, Slot};

static EPOCH: OnceLock<Instant> = OnceLock::new();

pub fn monotonic_micros() -> u64 {
    EPOCH.get_or_init(Instant::now).elapsed().as_micros() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskSubmitted,
    BeaconSent,
    ResponseRecv,
    ExecutorSelected,
    TaskSent,
    ResultRecv,
    /// An engine call finished; `latency_us` holds its duration.
    EngineDone,
    ChainDone,
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at_us: u64,
    pub kind: EventKind,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<u64>,
}

impl Event {
    pub fn new(kind: EventKind, task_id: impl Into<String>) -> Self {
        Self {
            at_us: monotonic_micros(),
            kind,
            task_id: task_id.into(),
            chain_id: None,
            subtask_index: None,
            agent: None,
            latency_us: None,
        }
    }

    pub fn at_slot(kind: EventKind, slot: &Slot) -> Self {
        Self::new(kind, slot.task_id.clone())
            .chain(slot.chain_id)
            .step(slot.subtask_index)
    }

    pub fn chain(mut self, chain_id: u32) -> Self {
        self.chain_id = Some(chain_id);
        self
    }

    pub fn step(mut self, subtask_index: u32) -> Self {
        self.subtask_index = Some(subtask_index);
        self
    }

    pub fn agent(mut self, agent: AgentId) -> Self {
        self.agent = Some(agent);
        self
    }

    pub fn latency_us(mut self, latency_us: u64) -> Self {
        self.latency_us = Some(latency_us);
        self
    }
}

#[derive(Debug, Default)]
struct Inner {
    events: Vec<Event>,
    sink: Option<File>,
}

/// Shared, append-only event log with an optional canonical-JSON-lines file sink.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    inner: Arc<Mutex<Inner>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                events: Vec::new(),
                sink: Some(file),
            })),
        })
    }

    pub fn record(&self, event: Event) {
        let mut inner = self.inner.lock().expect("event log poisoned");
        if let Some(file) = inner.sink.as_mut() {
            if let Ok(mut line) = to_canonical_json(&event) {
                line.push(b'\n');
                if let Err(e) = file.write_all(&line) {
                    tracing::warn!(error = %e, "event log write failed");
                }
            }
        }
        inner.events.push(event);
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().expect("event log poisoned").events.clone()
    }

    pub fn events_for(&self, task_id: &str) -> Vec<Event> {
        self.inner
            .lock()
            .expect("event log poisoned")
            .events
            .iter()
            .filter(|e| e.task_id == task_id)
            .cloned()
            .collect()
    }

    pub fn read_file(path: &Path) -> std::io::Result<Vec<Event>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(ev) => out.push(ev),
                Err(e) => tracing::warn!(error = %e, "skipping unparseable event line"),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("task {task_id}: missing events: {}", missing.join(", "))]
    Incomplete {
        task_id: String,
        missing: Vec<String>,
    },
    #[error("event log contains no tasks")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Registration,
    Beacon,
    Dispatch,
    Voting,
}

/// Time accounting for one task, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadBreakdown {
    pub task_id: String,
    pub total_us: u64,
    pub engine_us: u64,
    pub orchestration_us: u64,
    pub ratio: f64,
    pub phases: BTreeMap<Phase, u64>,
    /// Chain whose completion gated the verdict.
    pub critical_chain: u32,
}

fn phase_after(kind: EventKind) -> Phase {
    match kind {
        EventKind::TaskSubmitted => Phase::Registration,
        EventKind::BeaconSent | EventKind::ResponseRecv => Phase::Beacon,
        EventKind::ExecutorSelected
        | EventKind::TaskSent
        | EventKind::ResultRecv
        | EventKind::EngineDone
        | EventKind::ChainDone => Phase::Dispatch,
        EventKind::Verdict => Phase::Voting,
    }
}

/// Overhead of every task in `events` that reached a verdict, keyed by task id.
/// Tasks without a verdict are skipped.
pub fn overhead_reports(events: &[Event]) -> Result<Vec<OverheadBreakdown>, ReportError> {
    let tasks: BTreeSet<&str> = events
        .iter()
        .filter(|e| e.kind == EventKind::Verdict)
        .map(|e| e.task_id.as_str())
        .collect();
    if tasks.is_empty() {
        return Err(ReportError::Empty);
    }
    tasks
        .into_iter()
        .map(|t| {
            let own: Vec<Event> = events.iter().filter(|e| e.task_id == t).cloned().collect();
            overhead_report(&own)
        })
        .collect()
}

/// Splits one task's wall time into engine time and orchestration phases.
///
/// Chains run concurrently, so the accounting follows the critical path: the
/// task-level events plus those of the chain that finished last. Engine calls on
/// that chain are sequential; each spans `[at - latency, at]` of its `engine_done`
/// event. Every other stretch of time is charged to the phase named by the event
/// that opened it, and the segment ending at the verdict is voting. Phases plus
/// engine time equal the total exactly.
pub fn overhead_report(events: &[Event]) -> Result<OverheadBreakdown, ReportError> {
    let task_id = events.first().map(|e| e.task_id.clone()).unwrap_or_default();
    let find = |kind| events.iter().find(|e| e.kind == kind);
    let mut missing = Vec::new();
    let submitted = find(EventKind::TaskSubmitted);
    let verdict = find(EventKind::Verdict);
    let critical = events
        .iter()
        .filter(|e| e.kind == EventKind::ChainDone)
        .filter_map(|e| e.chain_id.map(|c| (e.at_us, c)))
        .max();
    if submitted.is_none() {
        missing.push("task_submitted".to_string());
    }
    if verdict.is_none() {
        missing.push("verdict".to_string());
    }
    if critical.is_none() {
        missing.push("chain_done".to_string());
    }
    let (Some(submitted), Some(verdict), Some((_, critical_chain))) = (submitted, verdict, critical)
    else {
        return Err(ReportError::Incomplete { task_id, missing });
    };
    let (start, end) = (submitted.at_us, verdict.at_us.max(submitted.at_us));

    let mut timeline: Vec<&Event> = events
        .iter()
        .filter(|e| e.chain_id.is_none() || e.chain_id == Some(critical_chain))
        .filter(|e| e.kind != EventKind::Verdict && (start..=end).contains(&e.at_us))
        .collect();
    timeline.sort_by_key(|e| e.at_us);

    let mut engine: Vec<(u64, u64)> = timeline
        .iter()
        .filter(|e| e.kind == EventKind::EngineDone)
        .map(|e| {
            let lat = e.latency_us.unwrap_or(0);
            (e.at_us.saturating_sub(lat).max(start), e.at_us)
        })
        .collect();
    engine.sort();
    let engine = union(engine);
    let overlap = |a: u64, b: u64| -> u64 {
        engine
            .iter()
            .map(|&(s, e)| e.min(b).saturating_sub(s.max(a)))
            .sum()
    };

    let mut phases: BTreeMap<Phase, u64> = [
        (Phase::Registration, 0),
        (Phase::Beacon, 0),
        (Phase::Dispatch, 0),
        (Phase::Voting, 0),
    ]
    .into_iter()
    .collect();
    for (i, ev) in timeline.iter().enumerate() {
        let seg_end = timeline.get(i + 1).map_or(end, |n| n.at_us);
        let phase = if i + 1 == timeline.len() {
            Phase::Voting
        } else {
            phase_after(ev.kind)
        };
        let span = seg_end - ev.at_us;
        *phases.get_mut(&phase).unwrap() += span - overlap(ev.at_us, seg_end);
    }
    let total_us = end - start;
    let engine_us = overlap(start, end);
    let orchestration_us = total_us - engine_us;
    Ok(OverheadBreakdown {
        task_id,
        total_us,
        engine_us,
        orchestration_us,
        ratio: if total_us == 0 {
            0.0
        } else {
            orchestration_us as f64 / total_us as f64
        },
        phases,
        critical_chain,
    })
}

fn union(sorted: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (s, e) in sorted {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}
