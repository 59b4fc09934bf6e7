//! Hash-chained, append-only audit log.
//!
//! Each line is the canonical rendering of one record. A record's
//! `self_digest` is `sha256(prev_digest || canonical(record minus self_digest))`,
//! so the digest covers every other field, including the timestamp.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::GovernanceError;
use crate::canonical::{self, GENESIS_DIGEST};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditRecordKind {
    Proposal,
    Verification,
    Commit,
    Rejection,
    Rollback,
    Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub offset: u64,
    pub timestamp: String,
    pub episode: u64,
    pub record_kind: AuditRecordKind,
    pub payload: Value,
    pub prev_digest: String,
    pub self_digest: String,
}

#[derive(Serialize)]
struct Unsealed<'a> {
    offset: u64,
    timestamp: &'a str,
    episode: u64,
    record_kind: AuditRecordKind,
    payload: &'a Value,
    prev_digest: &'a str,
}

/// Digest of a record given its other fields.
pub fn record_digest(record: &AuditRecord) -> String {
    let body = canonical::canonical_bytes(&Unsealed {
        offset: record.offset,
        timestamp: &record.timestamp,
        episode: record.episode,
        record_kind: record.record_kind,
        payload: &record.payload,
        prev_digest: &record.prev_digest,
    });
    let mut h = Sha256::new();
    h.update(record.prev_digest.as_bytes());
    h.update(&body);
    hex::encode(h.finalize())
}

/// True iff every line is a canonical record, offsets are dense from 0, every
/// `prev_digest` links to the previous `self_digest` (genesis for the first)
/// and every `self_digest` recomputes. An empty log verifies.
pub fn verify_audit_chain(text: &[u8]) -> bool {
    if text.is_empty() {
        return true;
    }
    let Ok(text) = std::str::from_utf8(text) else { return false };
    let Some(body) = text.strip_suffix('\n') else { return false };
    let mut prev = GENESIS_DIGEST.to_string();
    for (i, line) in body.split('\n').enumerate() {
        let Ok(rec) = serde_json::from_str::<AuditRecord>(line) else { return false };
        if canonical::canonical_string(&rec) != line {
            return false;
        }
        if rec.offset != i as u64 || rec.prev_digest != prev || record_digest(&rec) != rec.self_digest {
            return false;
        }
        prev = rec.self_digest;
    }
    true
}

/// The audit log for one workspace (or in memory). Appends are serialized.
pub struct AuditLog {
    path: Option<PathBuf>,
    records: Mutex<Vec<AuditRecord>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("path", &self.path).field("len", &self.len()).finish()
    }
}

impl AuditLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self { path: None, records: Mutex::new(Vec::new()), clock }
    }

    /// Opens `workspace/audit/audit.jsonl`, refusing a log whose chain does
    /// not verify.
    pub fn open(workspace: &Path, clock: Arc<dyn Clock>) -> Result<Self, GovernanceError> {
        let dir = workspace.join("audit");
        fs::create_dir_all(&dir).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
        let path = dir.join("audit.jsonl");
        let mut records = Vec::new();
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
            if !verify_audit_chain(&bytes) {
                return Err(GovernanceError::CorruptAuditLog(path.display().to_string()));
            }
            for line in String::from_utf8_lossy(&bytes).lines() {
                records.push(serde_json::from_str(line).expect("verified lines parse"));
            }
        }
        Ok(Self { path: Some(path), records: Mutex::new(records), clock })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn now(&self) -> String {
        self.clock.now()
    }

    pub fn len(&self) -> u64 {
        self.records.lock().unwrap().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset the next appended record will get.
    pub fn next_offset(&self) -> u64 {
        self.len()
    }

    /// `self_digest` of the tail, or the genesis constant.
    pub fn head_digest(&self) -> String {
        self.records
            .lock()
            .unwrap()
            .last()
            .map(|r| r.self_digest.clone())
            .unwrap_or_else(|| GENESIS_DIGEST.to_string())
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn count(&self, kind: AuditRecordKind) -> u64 {
        self.records.lock().unwrap().iter().filter(|r| r.record_kind == kind).count() as u64
    }

    /// Builds, seals and appends a record linked to the current tail.
    pub fn append(&self, kind: AuditRecordKind, episode: u64, payload: Value) -> Result<u64, GovernanceError> {
        let mut records = self.records.lock().unwrap();
        let record = AuditRecord {
            offset: records.len() as u64,
            timestamp: self.clock.now(),
            episode,
            record_kind: kind,
            payload,
            prev_digest: records.last().map(|r| r.self_digest.clone()).unwrap_or_else(|| GENESIS_DIGEST.to_string()),
            self_digest: String::new(),
        };
        self.push_locked(&mut records, record)
    }

    /// Appends a caller-built record. Its `prev_digest` must match the tail;
    /// offset and `self_digest` are assigned here.
    pub fn append_record(&self, mut record: AuditRecord) -> Result<u64, GovernanceError> {
        let mut records = self.records.lock().unwrap();
        let tail = records.last().map(|r| r.self_digest.clone()).unwrap_or_else(|| GENESIS_DIGEST.to_string());
        if record.prev_digest != tail {
            return Err(GovernanceError::ChainMismatch { expected: tail, got: record.prev_digest });
        }
        record.offset = records.len() as u64;
        self.push_locked(&mut records, record)
    }

    fn push_locked(&self, records: &mut Vec<AuditRecord>, mut record: AuditRecord) -> Result<u64, GovernanceError> {
        record.self_digest = record_digest(&record);
        if let Some(path) = &self.path {
            let mut line = canonical::canonical_bytes(&record);
            line.push(b'\n');
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
            f.write_all(&line).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
        }
        let offset = record.offset;
        records.push(record);
        Ok(offset)
    }

    /// Canonical JSONL rendering of the in-memory records.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in self.records.lock().unwrap().iter() {
            out.extend(canonical::canonical_bytes(r));
            out.push(b'\n');
        }
        out
    }

    pub fn verify(&self) -> bool {
        match &self.path {
            Some(p) => fs::read(p).map(|b| verify_audit_chain(&b)).unwrap_or(false),
            None => verify_audit_chain(&self.to_jsonl()),
        }
    }
}
