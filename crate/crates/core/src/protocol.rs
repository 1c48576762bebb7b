//! Messages exchanged among avatar clients, agent stations and the branch
//! service, their canonical text encoding, and per-sender sequence checks.
//!
//! An envelope encodes as a single canonical JSON object (keys sorted, no
//! whitespace). The payload is adjacently tagged:
//!
//! ```text
//! {"payload":{"body":{...},"type":"ClientHello"},"sent_at":0,"seq":0,"session_id":"000...0","version":1}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::branch::AgentRole;
use crate::canonical;
use crate::inference::Intent;
use crate::ranging::ProximityZone;
use crate::station::{EncodedFrame, ObservationReport};
use crate::Millis;

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("unknown payload tag {0:?}")]
    UnknownPayloadTag(String),
    #[error("protocol version mismatch: got {0}")]
    VersionMismatch(u64),
}

/// Opaque 128-bit session identifier, rendered as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SessionId(u128);

impl SessionId {
    /// Reserved for the pre-session hello.
    pub const NIL: SessionId = SessionId(0);

    pub const fn from_u128(v: u128) -> Self {
        SessionId(v)
    }

    pub const fn as_u128(self) -> u128 {
        self.0
    }

    pub fn is_nil(self) -> bool {
        self.0 == 0
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for SessionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("session id must be 32 hex digits, got {s:?}"));
        }
        u128::from_str_radix(s, 16)
            .map(SessionId)
            .map_err(|e| e.to_string())
    }
}

impl Serialize for SessionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CustomerId(pub u64);

impl fmt::Display for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationId(pub u32);

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Avatar,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageEnvelope {
    pub version: u8,
    pub session_id: SessionId,
    pub seq: u64,
    pub sent_at: Millis,
    pub payload: MessagePayload,
}

impl MessageEnvelope {
    pub fn new(session_id: SessionId, seq: u64, sent_at: Millis, payload: MessagePayload) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            session_id,
            seq,
            sent_at,
            payload,
        }
    }

    /// Checks the type invariants that the serde shape alone cannot express.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.version != PROTOCOL_VERSION {
            return Err(ProtocolError::InvalidEnvelope(format!(
                "version must be {PROTOCOL_VERSION}, got {}",
                self.version
            )));
        }
        let is_hello = matches!(self.payload, MessagePayload::ClientHello { .. });
        if self.session_id.is_nil() && !is_hello {
            return Err(ProtocolError::InvalidEnvelope(format!(
                "nil session id is reserved for ClientHello, got {}",
                self.payload.tag()
            )));
        }
        match &self.payload {
            MessagePayload::ProximityUpdate { distance_m, .. }
                if !(distance_m.is_finite() && *distance_m >= 0.0) =>
            {
                Err(ProtocolError::InvalidEnvelope(format!(
                    "distance_m must be finite and >= 0, got {distance_m}"
                )))
            }
            MessagePayload::QueueUpdate { position: 0, .. } => Err(ProtocolError::InvalidEnvelope(
                "queue position must be >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Closed set of payloads. The `type` tag names the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", deny_unknown_fields)]
pub enum MessagePayload {
    ClientHello {
        client_kind: ClientKind,
        client_id: String,
        locale: String,
    },
    AuthRequest {
        customer_id: CustomerId,
        #[serde(with = "base64_bytes")]
        credential: Vec<u8>,
    },
    AuthResult {
        ok: bool,
        entitlements: BTreeSet<String>,
        reason: Option<String>,
    },
    ProximityUpdate {
        station_id: StationId,
        zone: ProximityZone,
        distance_m: f64,
    },
    UtteranceIn {
        text: String,
        locale: String,
    },
    FramePush {
        station_id: StationId,
        frame: EncodedFrame,
        captured_at: Millis,
    },
    AgentReply {
        text: String,
        intent: Intent,
        role: AgentRole,
    },
    RoleSwitch {
        new_role: AgentRole,
        reason: String,
    },
    QueueUpdate {
        position: u32,
        station_id: StationId,
        eta_s: u64,
    },
    HandoffDirective {
        target_station_id: StationId,
        reason: String,
    },
    ObservationReport(ObservationReport),
    SessionClose {
        reason: String,
    },
    ErrorMsg {
        code: String,
        detail: String,
    },
}

/// Every payload tag, in declaration order.
pub const PAYLOAD_TAGS: [&str; 13] = [
    "ClientHello",
    "AuthRequest",
    "AuthResult",
    "ProximityUpdate",
    "UtteranceIn",
    "FramePush",
    "AgentReply",
    "RoleSwitch",
    "QueueUpdate",
    "HandoffDirective",
    "ObservationReport",
    "SessionClose",
    "ErrorMsg",
];

impl MessagePayload {
    pub fn tag(&self) -> &'static str {
        match self {
            MessagePayload::ClientHello { .. } => "ClientHello",
            MessagePayload::AuthRequest { .. } => "AuthRequest",
            MessagePayload::AuthResult { .. } => "AuthResult",
            MessagePayload::ProximityUpdate { .. } => "ProximityUpdate",
            MessagePayload::UtteranceIn { .. } => "UtteranceIn",
            MessagePayload::FramePush { .. } => "FramePush",
            MessagePayload::AgentReply { .. } => "AgentReply",
            MessagePayload::RoleSwitch { .. } => "RoleSwitch",
            MessagePayload::QueueUpdate { .. } => "QueueUpdate",
            MessagePayload::HandoffDirective { .. } => "HandoffDirective",
            MessagePayload::ObservationReport(_) => "ObservationReport",
            MessagePayload::SessionClose { .. } => "SessionClose",
            MessagePayload::ErrorMsg { .. } => "ErrorMsg",
        }
    }
}

pub(crate) mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Canonical UTF-8 serialization of a valid envelope.
pub fn encode(envelope: &MessageEnvelope) -> Result<Vec<u8>, ProtocolError> {
    envelope.validate()?;
    canonical::to_canonical(envelope)
        .map(String::into_bytes)
        .map_err(|e| ProtocolError::InvalidEnvelope(e.to_string()))
}

/// Parses an envelope; key order in the input does not matter.
pub fn decode(bytes: &[u8]) -> Result<MessageEnvelope, ProtocolError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::MalformedMessage("envelope is not an object".into()))?;
    let version = obj
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| ProtocolError::MalformedMessage("missing or non-integer version".into()))?;
    if version != u64::from(PROTOCOL_VERSION) {
        return Err(ProtocolError::VersionMismatch(version));
    }
    let tag = obj
        .get("payload")
        .and_then(|p| p.get("type"))
        .and_then(Value::as_str)
        .ok_or_else(|| ProtocolError::MalformedMessage("missing payload type tag".into()))?;
    if !PAYLOAD_TAGS.contains(&tag) {
        return Err(ProtocolError::UnknownPayloadTag(tag.to_owned()));
    }
    let envelope: MessageEnvelope = serde_json::from_value(value)
        .map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?;
    envelope.validate()?;
    Ok(envelope)
}

/// Outcome of comparing an incoming seq with the last accepted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqCheck {
    Accept,
    Duplicate,
    /// Inclusive range of sequence numbers that never arrived.
    Gap {
        missing_from: u64,
        missing_to: u64,
    },
}

pub fn check_sequence(last_seq: Option<u64>, incoming: &MessageEnvelope) -> SeqCheck {
    check_seq_number(last_seq, incoming.seq)
}

pub fn check_seq_number(last_seq: Option<u64>, seq: u64) -> SeqCheck {
    let expected = match last_seq {
        None => 0,
        Some(last) if seq <= last => return SeqCheck::Duplicate,
        Some(last) => last + 1,
    };
    if seq == expected {
        SeqCheck::Accept
    } else {
        SeqCheck::Gap {
            missing_from: expected,
            missing_to: seq - 1,
        }
    }
}

/// Tracks the highest accepted seq for one sender on one session.
///
/// A gap is reported once; the tracker then resynchronizes on the incoming seq.
#[derive(Debug, Default, Clone)]
pub struct SequenceTracker {
    last: Option<u64>,
}

impl SequenceTracker {
    pub fn observe(&mut self, seq: u64) -> SeqCheck {
        let verdict = check_seq_number(self.last, seq);
        if verdict != SeqCheck::Duplicate {
            self.last = Some(seq);
        }
        verdict
    }

    pub fn last(&self) -> Option<u64> {
        self.last
    }
}

/// Outgoing counter for one sender on one session.
#[derive(Debug, Default, Clone)]
pub struct SequenceCounter {
    next: u64,
}

impl SequenceCounter {
    pub fn next_seq(&mut self) -> u64 {
        let seq = self.next;
        self.next += 1;
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello() -> MessageEnvelope {
        MessageEnvelope::new(
            SessionId::NIL,
            0,
            0,
            MessagePayload::ClientHello {
                client_kind: ClientKind::Avatar,
                client_id: "c1".into(),
                locale: "en".into(),
            },
        )
    }

    #[test]
    fn hello_roundtrips() {
        let env = hello();
        let bytes = encode(&env).unwrap();
        assert_eq!(decode(&bytes).unwrap(), env);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn canonical_text_shape() {
        let text = String::from_utf8(encode(&hello()).unwrap()).unwrap();
        assert_eq!(
            text,
            r#"{"payload":{"body":{"client_id":"c1","client_kind":"avatar","locale":"en"},"type":"ClientHello"},"sent_at":0,"seq":0,"session_id":"00000000000000000000000000000000","version":1}"#
        );
    }

    #[test]
    fn version_two_is_rejected_at_encode() {
        let mut env = hello();
        env.version = 2;
        assert!(matches!(
            encode(&env),
            Err(ProtocolError::InvalidEnvelope(_))
        ));
    }

    #[test]
    fn version_two_is_rejected_at_decode() {
        let text = String::from_utf8(encode(&hello()).unwrap()).unwrap();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        assert_eq!(
            decode(bumped.as_bytes()),
            Err(ProtocolError::VersionMismatch(2))
        );
    }

    #[test]
    fn truncated_bytes_are_malformed() {
        let bytes = encode(&hello()).unwrap();
        for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut]),
                Err(ProtocolError::MalformedMessage(_))
            ));
        }
    }

    #[test]
    fn bogus_tag_is_unknown() {
        let text = String::from_utf8(encode(&hello()).unwrap()).unwrap();
        let bogus = text.replace("\"ClientHello\"", "\"Bogus\"");
        assert_eq!(
            decode(bogus.as_bytes()),
            Err(ProtocolError::UnknownPayloadTag("Bogus".into()))
        );
    }

    #[test]
    fn key_reordering_is_tolerated() {
        let reordered = br#"{"version":1,"seq":0,"session_id":"00000000000000000000000000000000","sent_at":0,"payload":{"type":"ClientHello","body":{"locale":"en","client_kind":"avatar","client_id":"c1"}}}"#;
        let env = decode(reordered).unwrap();
        assert_eq!(env, hello());
        assert_eq!(encode(&env).unwrap(), encode(&hello()).unwrap());
    }

    #[test]
    fn unknown_fields_are_malformed() {
        let text = String::from_utf8(encode(&hello()).unwrap()).unwrap();
        let extra = text.replace("\"seq\":0", "\"seq\":0,\"extra\":true");
        assert!(matches!(
            decode(extra.as_bytes()),
            Err(ProtocolError::MalformedMessage(_))
        ));
    }

    #[test]
    fn nil_session_only_for_hello() {
        let env = MessageEnvelope::new(
            SessionId::NIL,
            1,
            5,
            MessagePayload::SessionClose {
                reason: "bye".into(),
            },
        );
        assert!(matches!(
            encode(&env),
            Err(ProtocolError::InvalidEnvelope(_))
        ));
    }

    #[test]
    fn payload_invariants_enforced() {
        let sid = SessionId::from_u128(7);
        let neg = MessageEnvelope::new(
            sid,
            0,
            0,
            MessagePayload::ProximityUpdate {
                station_id: StationId(1),
                zone: ProximityZone::Near,
                distance_m: -0.5,
            },
        );
        assert!(encode(&neg).is_err());
        let zero_pos = MessageEnvelope::new(
            sid,
            0,
            0,
            MessagePayload::QueueUpdate {
                position: 0,
                station_id: StationId(1),
                eta_s: 0,
            },
        );
        assert!(encode(&zero_pos).is_err());
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(check_seq_number(None, 0), SeqCheck::Accept);
        assert_eq!(check_seq_number(Some(4), 5), SeqCheck::Accept);
        assert_eq!(check_seq_number(Some(4), 3), SeqCheck::Duplicate);
        assert_eq!(
            check_seq_number(Some(4), 9),
            SeqCheck::Gap {
                missing_from: 5,
                missing_to: 8
            }
        );
    }

    /// Reference: replay the set of seqs that "should" have arrived.
    fn brute_force(last: Option<u64>, seq: u64) -> SeqCheck {
        let received: Vec<u64> = match last {
            None => vec![],
            Some(l) => (0..=l).collect(),
        };
        if received.contains(&seq) {
            return SeqCheck::Duplicate;
        }
        let missing: Vec<u64> = (0..seq).filter(|s| !received.contains(s)).collect();
        match (missing.first(), missing.last()) {
            (Some(&a), Some(&b)) => SeqCheck::Gap {
                missing_from: a,
                missing_to: b,
            },
            _ => SeqCheck::Accept,
        }
    }

    #[test]
    fn sequence_matches_brute_force_enumeration() {
        let lasts = std::iter::once(None).chain((0..=10).map(Some));
        for last in lasts {
            for seq in 0..=10 {
                assert_eq!(
                    check_seq_number(last, seq),
                    brute_force(last, seq),
                    "last={last:?} seq={seq}"
                );
            }
        }
    }

    #[test]
    fn tracker_resyncs_after_gap() {
        let mut t = SequenceTracker::default();
        assert_eq!(t.observe(0), SeqCheck::Accept);
        assert_eq!(t.observe(0), SeqCheck::Duplicate);
        assert!(matches!(t.observe(3), SeqCheck::Gap { .. }));
        assert_eq!(t.observe(4), SeqCheck::Accept);
        assert_eq!(t.last(), Some(4));
    }

    #[test]
    fn session_id_parses_hex() {
        let id: SessionId = "000000000000000000000000000000ff".parse().unwrap();
        assert_eq!(id.as_u128(), 255);
        assert!("ff".parse::<SessionId>().is_err());
    }
}
