use serde::{Deserialize, Serialize};

use super::identity::{AgentId, Identity, PublicKey, Signature};
use super::ProtocolError;

/// The four message categories exchanged between agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MsgType {
    Beacon,
    BeaconResponse,
    Task,
    TaskResult,
}

impl MsgType {
    pub const ALL: [MsgType; 4] = [
        MsgType::Beacon,
        MsgType::BeaconResponse,
        MsgType::Task,
        MsgType::TaskResult,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MsgType::Beacon => "Beacon",
            MsgType::BeaconResponse => "BeaconResponse",
            MsgType::Task => "Task",
            MsgType::TaskResult => "TaskResult",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// Solicits match scores for one sub-task slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeaconBody {
    pub requirement_vector: Vec<f64>,
    pub subtask_text: String,
    pub respond_by: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeaconResponseBody {
    pub score: f64,
    pub responder_load: u32,
    pub responded_at: u64,
}

/// Work assignment. `prior_results` holds `(question, boxed answer)` pairs of the
/// completed steps in order; `accumulated_scores` has one more entry than
/// `prior_results` because the current assignment's score is appended on dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBody {
    pub subtask_text: String,
    pub background: String,
    pub prior_results: Vec<(String, String)>,
    pub remaining_chain: Vec<String>,
    pub accumulated_scores: Vec<f64>,
}

/// Outcome of a Task. `step_scores` carries the scores the confidence was averaged
/// over. An empty `final_answer` with no scores reports a failed assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResultBody {
    pub final_answer: String,
    pub confidence: f64,
    pub step_scores: Vec<f64>,
}

impl TaskResultBody {
    pub fn success(final_answer: impl Into<String>, step_scores: Vec<f64>) -> Self {
        let confidence = mean(&step_scores);
        Self {
            final_answer: final_answer.into(),
            confidence,
            step_scores,
        }
    }

    pub fn failure() -> Self {
        Self {
            final_answer: String::new(),
            confidence: 0.0,
            step_scores: Vec::new(),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.final_answer.is_empty()
    }
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Beacon(BeaconBody),
    BeaconResponse(BeaconResponseBody),
    Task(TaskBody),
    TaskResult(TaskResultBody),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::Beacon(_) => MsgType::Beacon,
            Payload::BeaconResponse(_) => MsgType::BeaconResponse,
            Payload::Task(_) => MsgType::Task,
            Payload::TaskResult(_) => MsgType::TaskResult,
        }
    }
}

/// Identifies one sub-task slot `(task, chain, step)`. Step 0 of a chain is its
/// planning slot; execution steps are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub task_id: String,
    pub chain_id: u32,
    pub subtask_index: u32,
}

impl Slot {
    pub fn new(task_id: impl Into<String>, chain_id: u32, subtask_index: u32) -> Self {
        Self {
            task_id: task_id.into(),
            chain_id,
            subtask_index,
        }
    }

    pub fn is_planning(&self) -> bool {
        self.subtask_index == 0
    }
}

/// A signed protocol message.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender: AgentId,
    pub slot: Slot,
    pub payload: Payload,
    pub sent_at: u64,
    pub signature: Signature,
}

impl Envelope {
    /// Builds and signs an envelope. Fails if a field cannot be encoded.
    pub fn signed(
        identity: &Identity,
        slot: Slot,
        payload: Payload,
        sent_at: u64,
    ) -> Result<Self, ProtocolError> {
        let mut env = Envelope {
            sender: identity.agent_id(),
            slot,
            payload,
            sent_at,
            signature: Signature::empty(),
        };
        let region = super::codec::signed_region(&env)?;
        env.signature = identity.sign(&region);
        Ok(env)
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }

    /// Verifies the detached signature against `public_key`. Also requires that the
    /// key hashes to the claimed sender id.
    pub fn verify(&self, public_key: &PublicKey) -> Result<bool, ProtocolError> {
        if public_key.agent_id() != self.sender {
            return Ok(false);
        }
        let region = super::codec::signed_region(self)?;
        public_key.verify(&region, &self.signature)
    }
}
