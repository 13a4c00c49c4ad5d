//! What travels inside a frame: a protocol envelope or a control frame.
//!
//! Control frames carry ledger anti-entropy and heartbeats. They are told apart
//! from envelopes by a top-level `control` key, are signed the same way (over
//! their canonical JSON without `signature`), and are decoded canonically too.

use agora_core::ledger::AgentRecord;
use agora_core::protocol::{
    to_canonical_json, AgentId, Codec, Envelope, Identity, ProtocolError, PublicKey, Signature,
    WIRE_VERSION,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlBody {
    /// The sender's full record set. With `reply`, the receiver answers with its own.
    Sync { records: Vec<AgentRecord>, reply: bool },
    Heartbeat { sent_at: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlFrame {
    pub control: ControlBody,
    pub sender: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
    pub version: u64,
}

impl ControlFrame {
    pub fn signed(identity: &Identity, control: ControlBody) -> Result<Self, ProtocolError> {
        let mut frame = ControlFrame {
            control,
            sender: identity.agent_id(),
            signature: None,
            version: WIRE_VERSION,
        };
        let region = to_canonical_json(&frame)?;
        frame.signature = Some(identity.sign(&region));
        Ok(frame)
    }

    pub fn verify(&self, key: &PublicKey) -> Result<bool, ProtocolError> {
        let Some(sig) = self.signature else {
            return Ok(false);
        };
        if key.agent_id() != self.sender {
            return Ok(false);
        }
        let unsigned = ControlFrame {
            signature: None,
            ..self.clone()
        };
        key.verify(&to_canonical_json(&unsigned)?, &sig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Envelope(Envelope),
    Control(ControlFrame),
}

pub fn encode(codec: &Codec, msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    match msg {
        WireMessage::Envelope(e) => codec.encode(e),
        WireMessage::Control(c) => to_canonical_json(c),
    }
}

pub fn decode(codec: &Codec, bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| ProtocolError::Decode {
        position: Some(e.column()),
        reason: e.to_string(),
    })?;
    if value.get("control").is_none() {
        return codec.decode(bytes).map(WireMessage::Envelope);
    }
    let frame: ControlFrame = serde_json::from_value(value).map_err(|e| ProtocolError::Decode {
        position: None,
        reason: e.to_string(),
    })?;
    if frame.version != WIRE_VERSION {
        return Err(ProtocolError::Validation(format!("unsupported version {}", frame.version)));
    }
    if to_canonical_json(&frame)? != bytes {
        return Err(ProtocolError::Decode {
            position: None,
            reason: "control frame is not in canonical form".into(),
        });
    }
    Ok(WireMessage::Control(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use agora_core::protocol::{Payload, Slot, TaskResultBody};

    #[test]
    fn control_frames_round_trip_and_verify() {
        let id = Identity::from_seed([3; 32]);
        let codec = Codec::new(8);
        let frame = ControlFrame::signed(&id, ControlBody::Heartbeat { sent_at: 42 }).unwrap();
        assert!(frame.verify(&id.public_key()).unwrap());
        let msg = WireMessage::Control(frame.clone());
        let bytes = encode(&codec, &msg).unwrap();
        assert_eq!(decode(&codec, &bytes).unwrap(), msg);

        let mut forged = frame;
        forged.control = ControlBody::Heartbeat { sent_at: 43 };
        assert!(!forged.verify(&id.public_key()).unwrap());
        assert!(!forged.verify(&Identity::from_seed([4; 32]).public_key()).unwrap());
    }

    #[test]
    fn envelopes_pass_through() {
        let id = Identity::from_seed([3; 32]);
        let codec = Codec::new(8);
        let env = Envelope::signed(
            &id,
            Slot::new("t", 1, 2),
            Payload::TaskResult(TaskResultBody::success("4", vec![0.5])),
            9,
        )
        .unwrap();
        let msg = WireMessage::Envelope(env);
        assert_eq!(decode(&codec, &encode(&codec, &msg).unwrap()).unwrap(), msg);
    }

    #[test]
    fn non_canonical_control_frames_are_rejected() {
        let id = Identity::from_seed([3; 32]);
        let frame = ControlFrame::signed(&id, ControlBody::Heartbeat { sent_at: 42 }).unwrap();
        let pretty = serde_json::to_vec_pretty(&frame).unwrap();
        assert!(decode(&Codec::new(8), &pretty).is_err());
    }
}
