//! Append-only, hash-linked audit log.
//!
//! # Hash layout
//!
//! `entry_hash = SHA-256(prev_hash ‖ seq ‖ at ‖ kind ‖ session_id ‖ payload_digest)`
//!
//! | field            | bytes | encoding                         |
//! |------------------|-------|----------------------------------|
//! | `prev_hash`      | 32    | raw; all zero for the first entry |
//! | `seq`            | 8     | u64 big-endian                   |
//! | `at`             | 8     | u64 big-endian, ms               |
//! | `kind`           | 1     | [`AuditKind::code`]              |
//! | `session_id`     | 16    | u128 big-endian                  |
//! | `payload_digest` | 32    | SHA-256 of the canonical payload  |
//!
//! # File layout
//!
//! A chain file is a sequence of records, each a u32 big-endian length
//! (always [`RECORD_LEN`]) followed by
//! `seq(8) ‖ prev_hash(32) ‖ entry_hash(32) ‖ at(8) ‖ kind(1) ‖ payload_digest(32) ‖ session_id(16)`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::protocol::SessionId;
use crate::Millis;

pub type Hash32 = [u8; 32];

pub const GENESIS_PREV: Hash32 = [0; 32];
pub const RECORD_LEN: usize = 8 + 32 + 32 + 8 + 1 + 32 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuditKind {
    Utterance,
    Reply,
    RoleSwitch,
    AuthAttempt,
    Authorization,
    FrameRef,
    Handoff,
    ValidationFailure,
}

impl AuditKind {
    pub const ALL: [AuditKind; 8] = [
        AuditKind::Utterance,
        AuditKind::Reply,
        AuditKind::RoleSwitch,
        AuditKind::AuthAttempt,
        AuditKind::Authorization,
        AuditKind::FrameRef,
        AuditKind::Handoff,
        AuditKind::ValidationFailure,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    #[serde(with = "hex_hash")]
    pub prev_hash: Hash32,
    #[serde(with = "hex_hash")]
    pub entry_hash: Hash32,
    pub at: Millis,
    pub kind: AuditKind,
    #[serde(with = "hex_hash")]
    pub payload_digest: Hash32,
    pub session_id: SessionId,
}

impl AuditEntry {
    pub fn compute_hash(&self) -> Hash32 {
        entry_hash(
            &self.prev_hash,
            self.seq,
            self.at,
            self.kind,
            self.session_id,
            &self.payload_digest,
        )
    }
}

pub fn entry_hash(
    prev_hash: &Hash32,
    seq: u64,
    at: Millis,
    kind: AuditKind,
    session_id: SessionId,
    payload_digest: &Hash32,
) -> Hash32 {
    let mut h = Sha256::new();
    h.update(prev_hash);
    h.update(seq.to_be_bytes());
    h.update(at.to_be_bytes());
    h.update([kind.code()]);
    h.update(session_id.to_bytes());
    h.update(payload_digest);
    h.finalize().into()
}

/// SHA-256 of the canonical JSON rendering of a payload.
pub fn payload_digest(payload: &Value) -> Hash32 {
    Sha256::digest(canonical::to_canonical_string(payload).as_bytes()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainVerdict {
    Ok,
    TamperedAt(u64),
}

/// Recomputes every link; reports the first entry that breaks contiguity,
/// linkage or its own hash.
pub fn verify_chain(chain: &[AuditEntry]) -> ChainVerdict {
    let mut prev = GENESIS_PREV;
    for (i, entry) in chain.iter().enumerate() {
        let i = i as u64;
        if entry.seq != i || entry.prev_hash != prev || entry.compute_hash() != entry.entry_hash {
            return ChainVerdict::TamperedAt(i);
        }
        prev = entry.entry_hash;
    }
    ChainVerdict::Ok
}

/// In-memory chain plus a content-addressed store for payload bodies.
///
/// Payload bodies are optional: the chain always records that something
/// happened, while the side store keeps only what consent allows.
#[derive(Debug, Clone, Default)]
pub struct AuditChain {
    entries: Vec<AuditEntry>,
    payloads: BTreeMap<Hash32, Vec<u8>>,
}

impl AuditChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_hash(&self) -> Hash32 {
        self.entries.last().map_or(GENESIS_PREV, |e| e.entry_hash)
    }

    pub fn append(
        &mut self,
        kind: AuditKind,
        payload: &Value,
        session_id: SessionId,
        now: Millis,
        retain_payload: bool,
    ) -> &AuditEntry {
        let body = canonical::to_canonical_string(payload);
        let digest: Hash32 = Sha256::digest(body.as_bytes()).into();
        if retain_payload {
            self.payloads
                .entry(digest)
                .or_insert_with(|| body.into_bytes());
        }
        self.append_digest(kind, digest, session_id, now)
    }

    pub fn append_digest(
        &mut self,
        kind: AuditKind,
        payload_digest: Hash32,
        session_id: SessionId,
        now: Millis,
    ) -> &AuditEntry {
        let seq = self.entries.len() as u64;
        let prev_hash = self.last_hash();
        let entry = AuditEntry {
            seq,
            prev_hash,
            entry_hash: entry_hash(&prev_hash, seq, now, kind, session_id, &payload_digest),
            at: now,
            kind,
            payload_digest,
            session_id,
        };
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }

    pub fn payload(&self, digest: &Hash32) -> Option<&[u8]> {
        self.payloads.get(digest).map(Vec::as_slice)
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_chain(&self.entries)
    }
}

/// Utterance and Reply entries of one session, in append order.
pub fn export_transcript(chain: &[AuditEntry], session_id: SessionId) -> Vec<&AuditEntry> {
    chain
        .iter()
        .filter(|e| e.session_id == session_id)
        .filter(|e| matches!(e.kind, AuditKind::Utterance | AuditKind::Reply))
        .collect()
}

pub mod persist {
    //! Length-prefixed binary records; see the module docs for the layout.

    use super::*;

    #[derive(Debug, thiserror::Error, PartialEq, Eq)]
    #[error("undecodable audit record {index} at byte {offset}: {reason}")]
    pub struct RecordError {
        pub index: u64,
        pub offset: usize,
        pub reason: String,
    }

    pub fn encode_record(entry: &AuditEntry) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + RECORD_LEN);
        out.extend_from_slice(&(RECORD_LEN as u32).to_be_bytes());
        out.extend_from_slice(&entry.seq.to_be_bytes());
        out.extend_from_slice(&entry.prev_hash);
        out.extend_from_slice(&entry.entry_hash);
        out.extend_from_slice(&entry.at.to_be_bytes());
        out.push(entry.kind.code());
        out.extend_from_slice(&entry.payload_digest);
        out.extend_from_slice(&entry.session_id.to_bytes());
        out
    }

    pub fn encode_chain(entries: &[AuditEntry]) -> Vec<u8> {
        entries.iter().flat_map(encode_record).collect()
    }

    pub fn decode_chain(bytes: &[u8]) -> Result<Vec<AuditEntry>, RecordError> {
        let mut entries = Vec::new();
        let mut offset = 0;
        while offset < bytes.len() {
            let index = entries.len() as u64;
            let fail = |reason: &str| RecordError {
                index,
                offset,
                reason: reason.to_owned(),
            };
            let header = bytes
                .get(offset..offset + 4)
                .ok_or_else(|| fail("truncated length prefix"))?;
            let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
            if len != RECORD_LEN {
                return Err(fail(&format!("record length {len}, expected {RECORD_LEN}")));
            }
            let rec = bytes
                .get(offset + 4..offset + 4 + RECORD_LEN)
                .ok_or_else(|| fail("truncated record"))?;
            let take32 = |at: usize| -> Hash32 { rec[at..at + 32].try_into().expect("32 bytes") };
            let take8 =
                |at: usize| u64::from_be_bytes(rec[at..at + 8].try_into().expect("8 bytes"));
            let kind = AuditKind::from_code(rec[80]).ok_or_else(|| fail("unknown kind code"))?;
            entries.push(AuditEntry {
                seq: take8(0),
                prev_hash: take32(8),
                entry_hash: take32(40),
                at: take8(72),
                kind,
                payload_digest: take32(81),
                session_id: SessionId::from_u128(u128::from_be_bytes(
                    rec[113..129].try_into().expect("16 bytes"),
                )),
            });
            offset += 4 + RECORD_LEN;
        }
        Ok(entries)
    }

    /// Verifies persisted bytes; an undecodable record counts as tampering
    /// at that record's position.
    pub fn verify_bytes(bytes: &[u8]) -> ChainVerdict {
        match decode_chain(bytes) {
            Ok(entries) => verify_chain(&entries),
            Err(e) => {
                // Records before the damaged one may themselves be broken.
                let prefix_len = e.offset;
                match decode_chain(&bytes[..prefix_len]).map(|p| verify_chain(&p)) {
                    Ok(ChainVerdict::TamperedAt(i)) => ChainVerdict::TamperedAt(i),
                    _ => ChainVerdict::TamperedAt(e.index),
                }
            }
        }
    }

    pub fn read_chain_file(path: &Path) -> io::Result<Vec<u8>> {
        std::fs::read(path)
    }

    /// Appends records to a chain file; never truncates or rewrites.
    pub struct ChainFileWriter {
        file: File,
    }

    impl ChainFileWriter {
        pub fn open(path: &Path) -> io::Result<Self> {
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            Ok(Self { file })
        }

        pub fn append(&mut self, entry: &AuditEntry) -> io::Result<()> {
            self.file.write_all(&encode_record(entry))?;
            self.file.flush()
        }
    }

    pub fn write_chain_file(path: &Path, entries: &[AuditEntry]) -> io::Result<()> {
        std::fs::write(path, encode_chain(entries))
    }
}

mod hex_hash {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(h))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::persist::*;
    use super::*;
    use serde_json::json;

    fn sid(n: u128) -> SessionId {
        SessionId::from_u128(n)
    }

    fn sample_chain(n: usize) -> AuditChain {
        let mut chain = AuditChain::new();
        for i in 0..n {
            let kind = AuditKind::ALL[i % AuditKind::ALL.len()];
            chain.append(
                kind,
                &json!({"i": i}),
                sid(1 + (i % 2) as u128),
                1000 + i as u64,
                true,
            );
        }
        chain
    }

    #[test]
    fn genesis_links_to_zeros() {
        let chain = sample_chain(1);
        assert_eq!(chain.entries()[0].prev_hash, [0; 32]);
        assert_eq!(chain.entries()[0].seq, 0);
    }

    #[test]
    fn genesis_hash_matches_reference_layout() {
        let mut chain = AuditChain::new();
        let entry = chain
            .append(
                AuditKind::Utterance,
                &json!({"text": "hi"}),
                sid(0xabc),
                1_700_000_000_000,
                true,
            )
            .clone();
        // Independent rendering of the documented layout.
        let payload_digest = Sha256::digest(br#"{"text":"hi"}"#);
        let mut buf = vec![0u8; 32];
        buf.extend_from_slice(&0u64.to_be_bytes());
        buf.extend_from_slice(&1_700_000_000_000u64.to_be_bytes());
        buf.push(0);
        buf.extend_from_slice(&0xabcu128.to_be_bytes());
        buf.extend_from_slice(&payload_digest);
        assert_eq!(buf.len(), 97);
        assert_eq!(entry.payload_digest.as_slice(), payload_digest.as_slice());
        assert_eq!(entry.entry_hash.as_slice(), Sha256::digest(&buf).as_slice());
    }

    #[test]
    fn appends_chain_together() {
        let chain = sample_chain(2);
        let [a, b] = chain.entries() else { panic!() };
        assert_eq!((a.seq, b.seq), (0, 1));
        assert_eq!(b.prev_hash, a.entry_hash);
    }

    #[test]
    fn verify_examples() {
        assert_eq!(verify_chain(&[]), ChainVerdict::Ok);
        let chain = sample_chain(10);
        assert_eq!(chain.verify(), ChainVerdict::Ok);
        let mut entries = chain.entries().to_vec();
        entries[4].at += 1;
        assert_eq!(verify_chain(&entries), ChainVerdict::TamperedAt(4));
        let mut entries = chain.entries().to_vec();
        entries.remove(3);
        assert_eq!(verify_chain(&entries), ChainVerdict::TamperedAt(3));
    }

    #[test]
    fn every_byte_flip_in_entry_four_is_caught_at_four() {
        let chain = sample_chain(10);
        let bytes = encode_chain(chain.entries());
        let start = 4 * (4 + RECORD_LEN);
        for pos in start..start + 4 + RECORD_LEN {
            let mut copy = bytes.clone();
            copy[pos] ^= 0xff;
            assert_eq!(
                verify_bytes(&copy),
                ChainVerdict::TamperedAt(4),
                "byte {pos}"
            );
        }
    }

    #[test]
    fn file_roundtrip() {
        let chain = sample_chain(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.chain");
        let mut w = ChainFileWriter::open(&path).unwrap();
        for e in chain.entries() {
            w.append(e).unwrap();
        }
        let bytes = read_chain_file(&path).unwrap();
        assert_eq!(decode_chain(&bytes).unwrap(), chain.entries());
        assert_eq!(verify_bytes(&bytes), ChainVerdict::Ok);
    }

    #[test]
    fn transcript_filters_by_session_and_kind() {
        let mut chain = AuditChain::new();
        chain.append(AuditKind::Utterance, &json!("a1"), sid(1), 1, true);
        chain.append(AuditKind::Utterance, &json!("b1"), sid(2), 2, true);
        chain.append(AuditKind::RoleSwitch, &json!("r"), sid(1), 3, true);
        chain.append(AuditKind::Reply, &json!("a2"), sid(1), 4, true);
        let a = export_transcript(chain.entries(), sid(1));
        assert_eq!(a.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 3]);
        assert!(export_transcript(chain.entries(), sid(3)).is_empty());
    }

    #[test]
    fn payload_side_store_is_optional() {
        let mut chain = AuditChain::new();
        let kept = chain
            .append(AuditKind::Reply, &json!({"t": 1}), sid(1), 0, true)
            .payload_digest;
        let dropped = chain
            .append(AuditKind::Reply, &json!({"t": 2}), sid(1), 0, false)
            .payload_digest;
        assert_eq!(chain.payload(&kept), Some(&br#"{"t":1}"#[..]));
        assert_eq!(chain.payload(&dropped), None);
    }
}
