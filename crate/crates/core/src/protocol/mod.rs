//! Wire-level message types, canonical encoding, signatures, and framing.

mod codec;
mod envelope;
mod framing;
mod identity;

pub use codec::{signed_region, to_canonical_json, Codec, CONFIDENCE_TOLERANCE, WIRE_VERSION};
pub use envelope::{
    mean, BeaconBody, BeaconResponseBody, Envelope, MsgType, Payload, Slot, TaskBody,
    TaskResultBody,
};
pub use framing::{frame, read_frame, write_frame, FrameDecoder, LENGTH_PREFIX, MAX_FRAME};
pub use identity::{AgentId, Identity, PublicKey, Signature, PUBLIC_KEY_LEN, SIGNATURE_LEN};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("decode error at {position:?}: {reason}")]
    Decode {
        position: Option<usize>,
        reason: String,
    },
    #[error("unknown message type `{0}`")]
    UnknownMessageType(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// Milliseconds since the Unix epoch on the local wall clock.
pub fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
