//! Canonical JSON encoding of envelopes.
//!
//! Keys are emitted in sorted order with no whitespace, reals use the shortest
//! round-trippable decimal form, and `-0.0` is written as `0.0`. Decoding accepts
//! only canonical bytes: anything that would not re-encode to the same bytes is
//! rejected, which makes the encoding a bijection on valid envelopes.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::envelope::{Envelope, MsgType, Payload, Slot};
use super::identity::{AgentId, Signature};
use super::ProtocolError;

pub const WIRE_VERSION: u64 = 1;
pub const CONFIDENCE_TOLERANCE: f64 = 1e-9;

/// Encoder/decoder bound to the network-wide capability dimension.
#[derive(Debug, Clone, Copy)]
pub struct Codec {
    dimension: usize,
}

impl Codec {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn encode(&self, envelope: &Envelope) -> Result<Vec<u8>, ProtocolError> {
        let mut obj = envelope_object(envelope)?;
        obj.insert(
            "signature".into(),
            serde_json::to_value(envelope.signature).map_err(enc_err)?,
        );
        serde_json::to_vec(&Value::Object(obj)).map_err(enc_err)
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Envelope, ProtocolError> {
        let value: Value = serde_json::from_slice(bytes).map_err(|e| ProtocolError::Decode {
            position: Some(e.column()),
            reason: e.to_string(),
        })?;
        let Value::Object(mut obj) = value else {
            return Err(schema("envelope must be a JSON object"));
        };

        let msg_type = match obj.remove("msg_type") {
            Some(Value::String(s)) => {
                MsgType::parse(&s).ok_or(ProtocolError::UnknownMessageType(s))?
            }
            Some(_) => return Err(schema("msg_type must be a string")),
            None => return Err(schema("missing msg_type")),
        };
        match obj.remove("version") {
            Some(Value::Number(n)) if n.as_u64() == Some(WIRE_VERSION) => {}
            Some(v) => return Err(schema(&format!("unsupported version {v}"))),
            None => return Err(schema("missing version")),
        }

        let sender: AgentId = take(&mut obj, "sender")?;
        let task_id: String = take(&mut obj, "task_id")?;
        let chain_id: u32 = take(&mut obj, "chain_id")?;
        let subtask_index: u32 = take(&mut obj, "subtask_index")?;
        let sent_at: u64 = take(&mut obj, "sent_at")?;
        let signature: Signature = take(&mut obj, "signature")?;
        let payload_value = obj.remove("payload").ok_or_else(|| schema("missing payload"))?;
        if let Some(extra) = obj.keys().next() {
            return Err(schema(&format!("unknown field `{extra}`")));
        }

        let payload = match msg_type {
            MsgType::Beacon => Payload::Beacon(from_value(payload_value)?),
            MsgType::BeaconResponse => Payload::BeaconResponse(from_value(payload_value)?),
            MsgType::Task => Payload::Task(from_value(payload_value)?),
            MsgType::TaskResult => Payload::TaskResult(from_value(payload_value)?),
        };
        let envelope = Envelope {
            sender,
            slot: Slot {
                task_id,
                chain_id,
                subtask_index,
            },
            payload,
            sent_at,
            signature,
        };
        self.validate(&envelope)?;

        let canonical = self.encode(&envelope)?;
        if canonical != bytes {
            let position = canonical
                .iter()
                .zip(bytes)
                .position(|(a, b)| a != b)
                .unwrap_or(canonical.len().min(bytes.len()));
            return Err(ProtocolError::Decode {
                position: Some(position),
                reason: "non-canonical encoding".into(),
            });
        }
        Ok(envelope)
    }

    /// Checks the per-payload invariants.
    pub fn validate(&self, envelope: &Envelope) -> Result<(), ProtocolError> {
        match &envelope.payload {
            Payload::Beacon(b) => {
                if b.requirement_vector.len() != self.dimension {
                    return Err(ProtocolError::Validation(format!(
                        "requirement vector has dimension {}, expected {}",
                        b.requirement_vector.len(),
                        self.dimension
                    )));
                }
                if !b.requirement_vector.iter().all(|x| unit(*x)) {
                    return Err(invalid("requirement components must lie in [0,1]"));
                }
                if !b.requirement_vector.iter().any(|x| *x > 0.0) {
                    return Err(invalid("requirement vector must have a positive component"));
                }
            }
            Payload::BeaconResponse(r) => {
                if !unit(r.score) {
                    return Err(invalid("score must lie in [0,1]"));
                }
            }
            Payload::Task(t) => {
                if !t.accumulated_scores.iter().all(|x| unit(*x)) {
                    return Err(invalid("accumulated scores must lie in [0,1]"));
                }
                if t.accumulated_scores.len() != t.prior_results.len() + 1 {
                    return Err(invalid(
                        "accumulated_scores must have one entry per prior result plus one",
                    ));
                }
            }
            Payload::TaskResult(r) => {
                if !unit(r.confidence) || !r.step_scores.iter().all(|x| unit(*x)) {
                    return Err(invalid("confidence and step scores must lie in [0,1]"));
                }
                if r.step_scores.is_empty() {
                    if !r.final_answer.is_empty() || r.confidence != 0.0 {
                        return Err(invalid("a result without scores must be a failure report"));
                    }
                } else {
                    let mean = super::envelope::mean(&r.step_scores);
                    if (mean - r.confidence).abs() > CONFIDENCE_TOLERANCE {
                        return Err(invalid("confidence must equal the mean step score"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Canonical JSON (sorted keys, compact, finite reals) for any serializable value.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>, ProtocolError> {
    let v = body_value(value)?;
    serde_json::to_vec(&v).map_err(enc_err)
}

/// Bytes covered by the signature: the canonical envelope without `signature`.
pub fn signed_region(envelope: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let obj = envelope_object(envelope)?;
    serde_json::to_vec(&Value::Object(obj)).map_err(enc_err)
}

fn envelope_object(envelope: &Envelope) -> Result<Map<String, Value>, ProtocolError> {
    let payload = match &envelope.payload {
        Payload::Beacon(b) => body_value(b)?,
        Payload::BeaconResponse(b) => body_value(b)?,
        Payload::Task(b) => body_value(b)?,
        Payload::TaskResult(b) => body_value(b)?,
    };
    let mut obj = Map::new();
    obj.insert("chain_id".into(), envelope.slot.chain_id.into());
    obj.insert("msg_type".into(), envelope.msg_type().as_str().into());
    obj.insert("payload".into(), payload);
    obj.insert("sender".into(), envelope.sender.to_hex().into());
    obj.insert("sent_at".into(), envelope.sent_at.into());
    obj.insert("subtask_index".into(), envelope.slot.subtask_index.into());
    obj.insert("task_id".into(), envelope.slot.task_id.clone().into());
    obj.insert("version".into(), WIRE_VERSION.into());
    Ok(obj)
}

/// Serializes a body to a JSON value, rejecting non-finite reals and folding `-0.0`.
fn body_value<T: Serialize>(body: &T) -> Result<Value, ProtocolError> {
    let mut value = serde_json::to_value(body).map_err(enc_err)?;
    canonicalize_reals(&mut value)?;
    Ok(value)
}

fn canonicalize_reals(value: &mut Value) -> Result<(), ProtocolError> {
    match value {
        // serde_json turns NaN and infinities into null.
        Value::Null => Err(ProtocolError::Encoding(
            "non-finite real is not representable".into(),
        )),
        Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                if f == 0.0 && f.is_sign_negative() {
                    *value = Value::from(0.0);
                }
            }
            Ok(())
        }
        Value::Array(items) => items.iter_mut().try_for_each(canonicalize_reals),
        Value::Object(map) => map.values_mut().try_for_each(canonicalize_reals),
        _ => Ok(()),
    }
}

fn take<T: DeserializeOwned>(obj: &mut Map<String, Value>, key: &str) -> Result<T, ProtocolError> {
    let v = obj
        .remove(key)
        .ok_or_else(|| schema(&format!("missing field `{key}`")))?;
    serde_json::from_value(v).map_err(|e| schema(&format!("field `{key}`: {e}")))
}

fn from_value<T: DeserializeOwned>(v: Value) -> Result<T, ProtocolError> {
    serde_json::from_value(v).map_err(|e| schema(&format!("payload: {e}")))
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn schema(reason: &str) -> ProtocolError {
    ProtocolError::Decode {
        position: None,
        reason: reason.to_string(),
    }
}

fn invalid(reason: &str) -> ProtocolError {
    ProtocolError::Validation(reason.to_string())
}

fn enc_err(e: serde_json::Error) -> ProtocolError {
    ProtocolError::Encoding(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{BeaconBody, BeaconResponseBody, Identity, TaskResultBody};

    fn beacon(identity: &Identity, vector: Vec<f64>) -> Envelope {
        Envelope::signed(
            identity,
            Slot::new("task-1", 0, 1),
            Payload::Beacon(BeaconBody {
                requirement_vector: vector,
                subtask_text: "What is 2+2?".into(),
                respond_by: 1_700_000_002_000,
            }),
            1_700_000_000_000,
        )
        .unwrap()
    }

    #[test]
    fn beacon_round_trip_d3() {
        let codec = Codec::new(3);
        let id = Identity::from_seed([9; 32]);
        let env = beacon(&id, vec![1.0, 0.0, 0.0]);
        let bytes = codec.encode(&env).unwrap();
        assert_eq!(codec.decode(&bytes).unwrap(), env);
    }

    #[test]
    fn encoding_is_deterministic_and_sorted() {
        let codec = Codec::new(3);
        let env = beacon(&Identity::from_seed([9; 32]), vec![1.0, 0.5, 0.0]);
        let a = codec.encode(&env).unwrap();
        let b = codec.encode(&env).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(r#"{"chain_id":0,"msg_type":"Beacon","payload":{"requirement_vector":[1.0,0.5,0.0],"#));
        assert!(!text.contains("\": ") && !text.contains(", \""));
    }

    #[test]
    fn nan_score_is_encoding_error() {
        let codec = Codec::new(3);
        let id = Identity::from_seed([1; 32]);
        let env = Envelope {
            sender: id.agent_id(),
            slot: Slot::new("t", 0, 1),
            payload: Payload::BeaconResponse(BeaconResponseBody {
                score: f64::NAN,
                responder_load: 0,
                responded_at: 0,
            }),
            sent_at: 0,
            signature: Signature::empty(),
        };
        assert!(matches!(codec.encode(&env), Err(ProtocolError::Encoding(_))));
        assert!(matches!(
            Envelope::signed(&id, env.slot.clone(), env.payload.clone(), 0),
            Err(ProtocolError::Encoding(_))
        ));
    }

    #[test]
    fn negative_zero_is_folded() {
        let codec = Codec::new(3);
        let id = Identity::from_seed([1; 32]);
        let a = beacon(&id, vec![1.0, -0.0, 0.0]);
        let b = beacon(&id, vec![1.0, 0.0, 0.0]);
        assert_eq!(codec.encode(&a).unwrap(), codec.encode(&b).unwrap());
    }

    #[test]
    fn truncated_bytes_report_position() {
        let codec = Codec::new(3);
        let env = beacon(&Identity::from_seed([2; 32]), vec![0.0, 1.0, 0.0]);
        let bytes = codec.encode(&env).unwrap();
        let err = codec.decode(&bytes[..bytes.len() - 7]).unwrap_err();
        match err {
            ProtocolError::Decode { position, .. } => assert!(position.is_some()),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn gossip_msg_type_is_unknown() {
        let codec = Codec::new(3);
        let env = beacon(&Identity::from_seed([2; 32]), vec![0.0, 1.0, 0.0]);
        let text = String::from_utf8(codec.encode(&env).unwrap()).unwrap();
        let edited = text.replacen(r#""msg_type":"Beacon""#, r#""msg_type":"Gossip""#, 1);
        assert_ne!(edited, text);
        assert_eq!(
            codec.decode(edited.as_bytes()).unwrap_err(),
            ProtocolError::UnknownMessageType("Gossip".into())
        );
    }

    #[test]
    fn wrong_dimension_rejected() {
        let env = beacon(&Identity::from_seed([2; 32]), vec![0.0, 1.0, 0.0]);
        let bytes = Codec::new(3).encode(&env).unwrap();
        assert!(matches!(
            Codec::new(8).decode(&bytes),
            Err(ProtocolError::Validation(_))
        ));
    }

    #[test]
    fn whitespace_is_non_canonical() {
        let codec = Codec::new(3);
        let env = beacon(&Identity::from_seed([2; 32]), vec![0.0, 1.0, 0.0]);
        let text = String::from_utf8(codec.encode(&env).unwrap()).unwrap();
        let spaced = text.replacen(r#""chain_id":0"#, r#""chain_id": 0"#, 1);
        assert!(matches!(
            codec.decode(spaced.as_bytes()),
            Err(ProtocolError::Decode { .. })
        ));
    }

    #[test]
    fn bad_signature_encoding_rejected() {
        let codec = Codec::new(3);
        let env = beacon(&Identity::from_seed([2; 32]), vec![0.0, 1.0, 0.0]);
        let text = String::from_utf8(codec.encode(&env).unwrap()).unwrap();
        let sig = hex::encode(env.signature.as_bytes());
        let short = text.replacen(&sig, &sig[2..], 1);
        assert!(codec.decode(short.as_bytes()).is_err());
        let upper = text.replacen(&sig, &sig.to_uppercase(), 1);
        assert!(codec.decode(upper.as_bytes()).is_err());
    }

    #[test]
    fn task_result_confidence_must_match_mean() {
        let codec = Codec::new(3);
        let id = Identity::from_seed([4; 32]);
        let ok = Envelope::signed(
            &id,
            Slot::new("t", 1, 0),
            Payload::TaskResult(TaskResultBody::success("No", vec![0.8, 0.6, 1.0])),
            5,
        )
        .unwrap();
        let bytes = codec.encode(&ok).unwrap();
        assert_eq!(codec.decode(&bytes).unwrap(), ok);

        let mut bad = ok.clone();
        if let Payload::TaskResult(r) = &mut bad.payload {
            r.confidence = 0.5;
        }
        assert!(codec.validate(&bad).is_err());
    }
}
