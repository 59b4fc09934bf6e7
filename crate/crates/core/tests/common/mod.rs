//! Shared fixtures for the integration targets: a reference model of the
//! registry and the property checks run against it.
#![allow(dead_code)]

use std::collections::BTreeMap;

use evolve_core::clock::ClockKind;
use evolve_core::registry::{ArtifactId, HeadRef, KnowledgeDoc, Payload, Registry, RegistryError, StateSnapshot, WriteOp};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use sha2::{Digest, Sha256};

pub const IDS: usize = 4;

#[derive(Debug, Clone)]
pub enum Op {
    Put(usize, u8),
    /// `skew == 0` patches on the head; anything else is a stale base.
    Patch(usize, i8, u8),
    Prune(usize),
    /// Several writes in one transaction.
    Tx(Vec<(usize, u8)>),
    Snap,
    Restore(usize),
}

pub fn op() -> impl Strategy<Value = Op> {
    let i = 0..IDS;
    prop_oneof![
        3 => (i.clone(), any::<u8>()).prop_map(|(i, b)| Op::Put(i, b)),
        4 => (i.clone(), prop_oneof![4 => Just(0i8), 1 => -2i8..=2], any::<u8>()).prop_map(|(i, s, b)| Op::Patch(i, s, b)),
        1 => i.clone().prop_map(Op::Prune),
        1 => prop::collection::vec((i, any::<u8>()), 1..4).prop_map(Op::Tx),
        1 => Just(Op::Snap),
        1 => any::<usize>().prop_map(Op::Restore),
    ]
}

pub fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op(), 1..40)
}

pub fn id(i: usize) -> ArtifactId {
    ArtifactId::knowledge(format!("doc_{i}"))
}

pub fn payload(body: u8) -> Payload {
    Payload::Knowledge(KnowledgeDoc::fact("note", &format!("body {body}"), &["note"]))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Snapshot id recomputed from the head triples, independently of the
/// registry code.
pub fn expected_snapshot_id(heads: &BTreeMap<ArtifactId, HeadRef>) -> String {
    let mut triples: Vec<(String, u32, String)> =
        heads.iter().map(|(id, h)| (id.to_string(), h.version, h.digest.clone())).collect();
    triples.sort();
    sha_hex(&serde_json::to_vec(&triples).unwrap())
}

/// What the registry should hold: every stored version and the head pointer.
#[derive(Debug, Clone, Default)]
pub struct Model {
    /// (content digest, active) per version, dense from 1.
    pub versions: BTreeMap<ArtifactId, Vec<(String, bool)>>,
    pub heads: BTreeMap<ArtifactId, u32>,
}

impl Model {
    fn head(&self, id: &ArtifactId) -> Option<(u32, bool)> {
        let v = *self.heads.get(id)?;
        Some((v, self.versions[id][v as usize - 1].1))
    }

    /// Applies one write if the rules allow it; `false` when the registry
    /// must refuse.
    fn write(&mut self, w: &WriteOp) -> bool {
        let (digest, active) = match w {
            WriteOp::Put { id, payload } => {
                if self.versions.contains_key(id) {
                    return false;
                }
                (payload.digest(), true)
            }
            WriteOp::Patch { id, base_version, payload } => match self.head(id) {
                Some((v, true)) if v == *base_version => (payload.digest(), true),
                _ => return false,
            },
            WriteOp::Prune { id } => match self.head(id) {
                Some((v, true)) => (self.versions[id][v as usize - 1].0.clone(), false),
                _ => return false,
            },
        };
        let id = w.id().clone();
        let hist = self.versions.entry(id.clone()).or_default();
        hist.push((digest, active));
        self.heads.insert(id, hist.len() as u32);
        true
    }

    pub fn apply(&mut self, tx: &[WriteOp]) -> bool {
        let mut staged = self.clone();
        if tx.iter().all(|w| staged.write(w)) {
            *self = staged;
            true
        } else {
            false
        }
    }

    pub fn head_refs(&self) -> BTreeMap<ArtifactId, HeadRef> {
        self.heads
            .iter()
            .map(|(id, v)| (id.clone(), HeadRef { version: *v, digest: self.versions[id][*v as usize - 1].0.clone() }))
            .collect()
    }
}

fn fail(msg: String) -> Result<(), TestCaseError> {
    Err(TestCaseError::fail(msg))
}

/// The registry and the model, driven side by side.
pub struct Drive {
    pub reg: Registry,
    pub model: Model,
    pub snaps: Vec<(StateSnapshot, BTreeMap<ArtifactId, HeadRef>)>,
    pub episode: u64,
}

impl Drive {
    pub fn new() -> Self {
        Self { reg: Registry::in_memory(ClockKind::Logical.build()), model: Model::default(), snaps: vec![], episode: 0 }
    }

    fn tx_for(&self, op: &Op) -> Vec<WriteOp> {
        let head = |i: usize| self.model.heads.get(&id(i)).copied().unwrap_or(0);
        let write = |i: usize, b: u8| {
            if self.model.versions.contains_key(&id(i)) {
                WriteOp::Patch { id: id(i), base_version: head(i), payload: payload(b) }
            } else {
                WriteOp::Put { id: id(i), payload: payload(b) }
            }
        };
        match op {
            Op::Put(i, b) => vec![WriteOp::Put { id: id(*i), payload: payload(*b) }],
            Op::Patch(i, skew, b) => vec![WriteOp::Patch {
                id: id(*i),
                base_version: (i64::from(head(*i)) + i64::from(*skew)).max(0) as u32,
                payload: payload(*b),
            }],
            Op::Prune(i) => vec![WriteOp::Prune { id: id(*i) }],
            Op::Tx(ws) => ws.iter().map(|(i, b)| write(*i, *b)).collect(),
            Op::Snap | Op::Restore(_) => vec![],
        }
    }

    /// Applies `op` to both sides; returns the registry's error, if any.
    pub fn step(&mut self, op: &Op) -> Result<Option<RegistryError>, TestCaseError> {
        self.episode += 1;
        match op {
            Op::Snap => {
                let s = self.reg.take_snapshot(self.episode);
                self.snaps.push((s, self.model.head_refs()));
                Ok(None)
            }
            Op::Restore(k) => {
                if self.snaps.is_empty() {
                    return Ok(None);
                }
                let (s, heads) = self.snaps[k % self.snaps.len()].clone();
                self.reg.restore_snapshot(&s.snapshot_id).map_err(|e| TestCaseError::fail(e.to_string()))?;
                self.model.heads = heads.iter().map(|(id, h)| (id.clone(), h.version)).collect();
                Ok(None)
            }
            _ => {
                let tx = self.tx_for(op);
                let before = self.reg.dump_heads();
                let expect_ok = self.model.apply(&tx);
                match (self.reg.apply(&tx, None, self.episode), expect_ok) {
                    (Ok(_), true) => Ok(None),
                    (Err(e), false) => {
                        if self.reg.dump_heads() != before {
                            return Err(TestCaseError::fail(format!("refused transaction moved heads: {e}")));
                        }
                        Ok(Some(e))
                    }
                    (r, _) => Err(TestCaseError::fail(format!("{op:?}: registry {r:?}, model expected ok={expect_ok}"))),
                }
            }
        }
    }

    pub fn heads_match(&self) -> Result<(), TestCaseError> {
        let want = self.model.head_refs();
        if self.reg.current_heads() != want {
            return fail(format!("heads differ: {:?} vs {:?}", self.reg.current_heads(), want));
        }
        Ok(())
    }
}

/// Every id's stored versions run 1..=n with no gaps, and match the model.
pub fn prop_dense_versions(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut d = Drive::new();
    for op in ops {
        d.step(op)?;
        for (id, versions) in &d.model.versions {
            let hist = d.reg.history(id);
            let got: Vec<u32> = hist.iter().map(|r| r.version).collect();
            let want: Vec<u32> = (1..=versions.len() as u32).collect();
            if got != want {
                return fail(format!("{id}: versions {got:?}, expected {want:?}"));
            }
            for (r, (digest, active)) in hist.iter().zip(versions) {
                if &r.content_digest != digest || r.is_active() != *active {
                    return fail(format!("{id} v{} differs from the model", r.version));
                }
            }
        }
        d.heads_match()?;
    }
    Ok(())
}

/// Patches on anything but the head are refused with the right versions and
/// change nothing.
pub fn prop_stale_base(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut d = Drive::new();
    for op in ops {
        let expected = match op {
            Op::Patch(i, skew, _) => d.model.head(&id(*i)).and_then(|(head, active)| {
                let base = (i64::from(head) + i64::from(*skew)).max(0) as u32;
                (active && base != head).then(|| RegistryError::StaleBase { id: id(*i), base, head })
            }),
            _ => None,
        };
        let err = d.step(op)?;
        if let Some(want) = expected {
            if err.as_ref() != Some(&want) {
                return fail(format!("stale patch gave {err:?}, expected {want:?}"));
            }
        }
        d.heads_match()?;
    }
    Ok(())
}

/// Snapshot ids are a function of the heads alone: they match the
/// recomputed digest and a second registry fed the same ops agrees.
pub fn prop_snapshot_determinism(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut a = Drive::new();
    let mut b = Drive::new();
    for op in ops {
        a.step(op)?;
        b.step(op)?;
        let (ia, ib) = (a.reg.current_snapshot_id(), b.reg.current_snapshot_id());
        if ia != ib {
            return fail("replicas disagree on the snapshot id".into());
        }
        if ia != expected_snapshot_id(&a.model.head_refs()) {
            return fail("snapshot id does not match the recomputed digest".into());
        }
        if a.reg.take_snapshot(0).snapshot_id != ia {
            return fail("take_snapshot disagrees with current_snapshot_id".into());
        }
    }
    // The id does not depend on the order the heads were written in.
    let records: Vec<_> = a.reg.current_view().records().cloned().collect();
    let build = |order: Vec<&evolve_core::registry::VersionedArtifact>| {
        let r = Registry::in_memory(ClockKind::Logical.build());
        for rec in order {
            r.put_artifact(rec.id.clone(), rec.payload.clone(), None, 0).unwrap();
        }
        r.current_snapshot_id()
    };
    if build(records.iter().collect()) != build(records.iter().rev().collect()) {
        return fail("write order changed the snapshot id".into());
    }
    Ok(())
}

/// Restoring a snapshot reproduces its heads and id exactly, and the view
/// of a snapshot is unaffected by later writes.
pub fn prop_restore_exact(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut d = Drive::new();
    for op in ops {
        let target = match op {
            Op::Restore(k) if !d.snaps.is_empty() => Some(d.snaps[k % d.snaps.len()].clone()),
            _ => None,
        };
        d.step(op)?;
        if let Some((s, heads)) = target {
            if d.reg.current_heads() != heads || d.reg.current_snapshot_id() != s.snapshot_id {
                return fail(format!("restore of {} is not exact", s.snapshot_id));
            }
        }
    }
    for (s, heads) in &d.snaps {
        let view = d.reg.view(&s.snapshot_id).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if view.heads() != *heads {
            return fail(format!("view of {} changed after later writes", s.snapshot_id));
        }
    }
    Ok(())
}
