//! Versioned, content-addressed artifact registry.
//!
//! Holds the knowledge, tool and validation registries as per-id version
//! histories plus a head pointer per id. Stored versions are immutable; every
//! mutation appends a version and moves a head. Pruning is logical: it appends
//! a tombstone version carrying the previous payload with status `pruned`.
//!
//! On disk (when opened on a workspace):
//!
//! ```text
//! registry/<kind>/<name>/v<version>.artifact   canonical payload bytes
//! registry/<kind>/<name>/v<version>.meta.json  status, provenance, episode
//! registry/index.json                          heads map
//! snapshots/<snapshot_id>.json                 heads dump
//! ```

pub mod skill;
mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::clock::{Clock, SystemClock};

pub use types::{
    is_identifier, ArtifactId, ArtifactKind, ArtifactStatus, CheckKind, DocType, Expectation,
    KnowledgeDoc, Payload, ToolParam, ToolSpec, TypeTag, ValidationCase, VersionedArtifact,
    MAX_NAME_LEN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("artifact `{0}` already exists")]
    DuplicateId(ArtifactId),
    #[error("invalid payload for `{id}`: {reason}")]
    InvalidPayload { id: String, reason: String },
    #[error("artifact `{0}` not found")]
    NotFound(ArtifactId),
    #[error("version {version} of `{id}` is out of range (head {head})")]
    VersionOutOfRange { id: ArtifactId, version: u32, head: u32 },
    #[error("stale base version {base} for `{id}` (head is {head})")]
    StaleBase { id: ArtifactId, base: u32, head: u32 },
    #[error("artifact `{0}` is pruned")]
    ArtifactPruned(ArtifactId),
    #[error("artifact `{0}` is already pruned")]
    AlreadyPruned(ArtifactId),
    #[error("unknown snapshot `{0}`")]
    UnknownSnapshot(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl RegistryError {
    fn storage(e: impl std::fmt::Display) -> Self {
        RegistryError::StorageFailure(e.to_string())
    }
}

/// A single mutation inside a registry transaction.
#[derive(Debug, Clone, PartialEq)]
pub enum WriteOp {
    Put { id: ArtifactId, payload: Payload },
    Patch { id: ArtifactId, base_version: u32, payload: Payload },
    Prune { id: ArtifactId },
}

impl WriteOp {
    pub fn id(&self) -> &ArtifactId {
        match self {
            WriteOp::Put { id, .. } | WriteOp::Patch { id, .. } | WriteOp::Prune { id } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRef {
    pub version: u32,
    pub digest: String,
}

/// Content-addressed fixpoint of all registry heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub snapshot_id: String,
    pub heads: BTreeMap<ArtifactId, HeadRef>,
    pub episode_index: u64,
    pub created_at: String,
}

/// Digest over the `(id, head version, content digest)` triples sorted by id.
pub fn snapshot_id_of(heads: &BTreeMap<ArtifactId, HeadRef>) -> String {
    let mut triples: Vec<(String, u32, &str)> = heads
        .iter()
        .map(|(id, h)| (id.to_string(), h.version, h.digest.as_str()))
        .collect();
    triples.sort();
    canonical::digest_of(&triples)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub added: Vec<ArtifactId>,
    pub modified: Vec<(ArtifactId, u32, u32)>,
    pub pruned: Vec<ArtifactId>,
    /// Ids that are heads in the first snapshot but not in the second (only
    /// produced across a restore).
    #[serde(default)]
    pub removed: Vec<ArtifactId>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len(&self) -> usize {
        self.added.len() + self.modified.len() + self.pruned.len() + self.removed.len()
    }

    /// Restricts the change set to the given kinds.
    pub fn only(&self, kinds: &[ArtifactKind]) -> ChangeSet {
        let keep = |id: &ArtifactId| kinds.contains(&id.kind);
        ChangeSet {
            added: self.added.iter().filter(|i| keep(i)).cloned().collect(),
            modified: self.modified.iter().filter(|m| keep(&m.0)).cloned().collect(),
            pruned: self.pruned.iter().filter(|i| keep(i)).cloned().collect(),
            removed: self.removed.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }
}

/// Immutable view of the registry heads at one snapshot. Shadow states used
/// by the gate are views with candidate records overlaid.
#[derive(Debug, Clone)]
pub struct StateView {
    snapshot_id: String,
    records: BTreeMap<ArtifactId, Arc<VersionedArtifact>>,
}

impl StateView {
    pub fn snapshot_id(&self) -> &str {
        &self.snapshot_id
    }

    /// Head record regardless of status.
    pub fn get(&self, id: &ArtifactId) -> Option<&VersionedArtifact> {
        self.records.get(id).map(Arc::as_ref)
    }

    pub fn active(&self, id: &ArtifactId) -> Option<&VersionedArtifact> {
        self.get(id).filter(|r| r.is_active())
    }

    pub fn active_of_kind(&self, kind: ArtifactKind) -> impl Iterator<Item = &VersionedArtifact> {
        self.records
            .values()
            .map(Arc::as_ref)
            .filter(move |r| r.id.kind == kind && r.is_active())
    }

    pub fn records(&self) -> impl Iterator<Item = &VersionedArtifact> {
        self.records.values().map(Arc::as_ref)
    }

    pub fn heads(&self) -> BTreeMap<ArtifactId, HeadRef> {
        self.records
            .iter()
            .map(|(id, r)| {
                (id.clone(), HeadRef { version: r.version, digest: r.content_digest.clone() })
            })
            .collect()
    }

    /// Returns a new view with `records` replacing or adding heads.
    pub fn overlay(&self, records: impl IntoIterator<Item = VersionedArtifact>) -> StateView {
        let mut out = self.records.clone();
        for r in records {
            out.insert(r.id.clone(), Arc::new(r));
        }
        let mut view = StateView { snapshot_id: String::new(), records: out };
        view.snapshot_id = snapshot_id_of(&view.heads());
        view
    }

    /// Stages `ops` in order on a copy of this view, applying the same rules
    /// as [`Registry::apply`]. Refused ops are skipped and reported; the
    /// rest form the returned shadow view.
    pub fn simulate(
        &self,
        ops: &[WriteOp],
        episode: u64,
    ) -> (StateView, Vec<Result<VersionedArtifact, RegistryError>>) {
        let mut state = State::default();
        for (id, rec) in &self.records {
            // Pad the history so the next version follows the head.
            state.histories.insert(id.clone(), vec![Arc::clone(rec); rec.version as usize]);
            state.heads.insert(id.clone(), rec.version);
        }
        let results = ops
            .iter()
            .map(|op| stage(&mut state, op, None, episode).map(|r| r.as_ref().clone()))
            .collect();
        let records = state
            .heads
            .keys()
            .filter_map(|id| state.head_record(id).map(|r| (id.clone(), Arc::clone(r))))
            .collect();
        let mut view = StateView { snapshot_id: String::new(), records };
        view.snapshot_id = snapshot_id_of(&view.heads());
        (view, results)
    }
}

#[derive(Debug, Clone, Default)]
struct State {
    histories: BTreeMap<ArtifactId, Vec<Arc<VersionedArtifact>>>,
    heads: BTreeMap<ArtifactId, u32>,
}

impl State {
    fn head_record(&self, id: &ArtifactId) -> Option<&Arc<VersionedArtifact>> {
        let v = *self.heads.get(id)?;
        self.histories.get(id).map(|h| &h[v as usize - 1])
    }

    fn head_refs(&self) -> BTreeMap<ArtifactId, HeadRef> {
        self.heads
            .keys()
            .filter_map(|id| self.head_record(id))
            .map(|r| (r.id.clone(), HeadRef { version: r.version, digest: r.content_digest.clone() }))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    version: u32,
    digest: String,
    status: ArtifactStatus,
}

#[derive(Debug, Serialize, Deserialize)]
struct VersionMeta {
    content_digest: String,
    status: ArtifactStatus,
    provenance_ref: Option<u64>,
    created_episode: u64,
}

/// The persistent artifact state. Reads take a shared lock; all mutations go
/// through [`Registry::apply`], which is serialized by the write lock.
pub struct Registry {
    root: Option<PathBuf>,
    state: RwLock<State>,
    snapshots: RwLock<BTreeMap<String, StateSnapshot>>,
    fault_at: Mutex<Option<usize>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::in_memory(Arc::new(SystemClock))
    }
}

impl Registry {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            root: None,
            state: RwLock::new(State::default()),
            snapshots: RwLock::new(BTreeMap::new()),
            fault_at: Mutex::new(None),
            clock,
        }
    }

    /// Opens (or creates) the registry under a workspace directory.
    pub fn open(workspace: &Path, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        let reg_dir = workspace.join("registry");
        let snap_dir = workspace.join("snapshots");
        fs::create_dir_all(&reg_dir).map_err(RegistryError::storage)?;
        fs::create_dir_all(&snap_dir).map_err(RegistryError::storage)?;
        let mut state = State::default();
        for kind in ArtifactKind::ALL {
            let kind_dir = reg_dir.join(kind.as_str());
            if !kind_dir.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&kind_dir).map_err(RegistryError::storage)? {
                let entry = entry.map_err(RegistryError::storage)?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let id = ArtifactId::new(kind, name);
                let history = load_history(&entry.path(), &id)?;
                state.histories.insert(id, history);
            }
        }
        let index_path = reg_dir.join("index.json");
        if index_path.exists() {
            let bytes = fs::read(&index_path).map_err(RegistryError::storage)?;
            let index: BTreeMap<String, IndexEntry> =
                serde_json::from_slice(&bytes).map_err(RegistryError::storage)?;
            for (key, entry) in index {
                let id: ArtifactId = key.parse().map_err(RegistryError::StorageFailure)?;
                let history = state
                    .histories
                    .get(&id)
                    .ok_or_else(|| RegistryError::StorageFailure(format!("index names missing `{id}`")))?;
                let rec = history.get(entry.version as usize - 1).ok_or_else(|| {
                    RegistryError::StorageFailure(format!("index head {} of `{id}` missing", entry.version))
                })?;
                if rec.content_digest != entry.digest {
                    return Err(RegistryError::StorageFailure(format!("index digest mismatch for `{id}`")));
                }
                state.heads.insert(id, entry.version);
            }
        }
        let mut snapshots = BTreeMap::new();
        for entry in fs::read_dir(&snap_dir).map_err(RegistryError::storage)? {
            let path = entry.map_err(RegistryError::storage)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(RegistryError::storage)?;
            let snap: StateSnapshot = serde_json::from_slice(&bytes).map_err(RegistryError::storage)?;
            snapshots.insert(snap.snapshot_id.clone(), snap);
        }
        Ok(Self {
            root: Some(workspace.to_path_buf()),
            state: RwLock::new(state),
            snapshots: RwLock::new(snapshots),
            fault_at: Mutex::new(None),
            clock,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Fault injection for atomicity testing: the `n`-th (1-based) write of
    /// the next transaction fails with a storage error. One-shot.
    #[doc(hidden)]
    pub fn inject_write_fault(&self, n: usize) {
        *self.fault_at.lock().unwrap() = Some(n);
    }

    pub fn put_artifact(
        &self,
        id: ArtifactId,
        payload: Payload,
        provenance: Option<u64>,
        episode: u64,
    ) -> Result<VersionedArtifact, RegistryError> {
        self.apply_one(WriteOp::Put { id, payload }, provenance, episode)
    }

    pub fn patch_artifact(
        &self,
        id: ArtifactId,
        base_version: u32,
        payload: Payload,
        provenance: Option<u64>,
        episode: u64,
    ) -> Result<VersionedArtifact, RegistryError> {
        self.apply_one(WriteOp::Patch { id, base_version, payload }, provenance, episode)
    }

    pub fn prune_artifact(
        &self,
        id: ArtifactId,
        provenance: Option<u64>,
        episode: u64,
    ) -> Result<VersionedArtifact, RegistryError> {
        self.apply_one(WriteOp::Prune { id }, provenance, episode)
    }

    fn apply_one(&self, op: WriteOp, provenance: Option<u64>, episode: u64) -> Result<VersionedArtifact, RegistryError> {
        Ok(self.apply(&[op], provenance, episode)?.remove(0))
    }

    pub fn get_artifact(&self, id: &ArtifactId, version: Option<u32>) -> Result<VersionedArtifact, RegistryError> {
        let state = self.state.read().unwrap();
        let head = *state.heads.get(id).ok_or_else(|| RegistryError::NotFound(id.clone()))?;
        let v = version.unwrap_or(head);
        if v == 0 || v > head {
            return Err(RegistryError::VersionOutOfRange { id: id.clone(), version: v, head });
        }
        Ok(state.histories[id][v as usize - 1].as_ref().clone())
    }

    /// Every stored version of `id`, including versions beyond the head after
    /// a restore.
    pub fn history(&self, id: &ArtifactId) -> Vec<VersionedArtifact> {
        let state = self.state.read().unwrap();
        state
            .histories
            .get(id)
            .map(|h| h.iter().map(|r| r.as_ref().clone()).collect())
            .unwrap_or_default()
    }

    pub fn head_version(&self, id: &ArtifactId) -> Option<u32> {
        self.state.read().unwrap().heads.get(id).copied()
    }

    /// True if the id has any stored history (live, pruned or rolled back).
    pub fn exists(&self, id: &ArtifactId) -> bool {
        self.state.read().unwrap().histories.contains_key(id)
    }

    pub fn ids(&self) -> Vec<ArtifactId> {
        self.state.read().unwrap().histories.keys().cloned().collect()
    }

    /// Applies `ops` as one transaction: either every op is stored and the
    /// heads move together, or nothing changes (in memory and on disk).
    pub fn apply(
        &self,
        ops: &[WriteOp],
        provenance: Option<u64>,
        episode: u64,
    ) -> Result<Vec<VersionedArtifact>, RegistryError> {
        let mut guard = self.state.write().unwrap();
        let fault_at = self.fault_at.lock().unwrap().take();
        let mut staged = guard.clone();
        let mut produced = Vec::with_capacity(ops.len());
        for op in ops {
            let rec = stage(&mut staged, op, provenance, episode)?;
            produced.push(rec);
        }
        self.persist(&staged, &produced, fault_at)?;
        *guard = staged;
        Ok(produced.iter().map(|r| r.as_ref().clone()).collect())
    }

    fn persist(
        &self,
        staged: &State,
        produced: &[Arc<VersionedArtifact>],
        fault_at: Option<usize>,
    ) -> Result<(), RegistryError> {
        let mut written: Vec<PathBuf> = Vec::new();
        let mut created: Vec<PathBuf> = Vec::new();
        let result = (|| {
            for (i, rec) in produced.iter().enumerate() {
                if fault_at == Some(i + 1) {
                    return Err(RegistryError::StorageFailure(format!(
                        "injected fault on write {} of {}",
                        i + 1,
                        produced.len()
                    )));
                }
                let Some(root) = &self.root else { continue };
                let dir = root.join("registry").join(rec.id.kind.as_str()).join(&rec.id.name);
                let mut missing: Vec<PathBuf> = dir.ancestors().take_while(|p| !p.exists()).map(Path::to_path_buf).collect();
                fs::create_dir_all(&dir).map_err(RegistryError::storage)?;
                missing.reverse();
                created.extend(missing);
                let artifact = dir.join(format!("v{}.artifact", rec.version));
                let meta = dir.join(format!("v{}.meta.json", rec.version));
                write_new(&artifact, &rec.payload.canonical_bytes())?;
                written.push(artifact);
                let m = VersionMeta {
                    content_digest: rec.content_digest.clone(),
                    status: rec.status,
                    provenance_ref: rec.provenance_ref,
                    created_episode: rec.created_episode,
                };
                write_new(&meta, &canonical::canonical_bytes(&m))?;
                written.push(meta);
            }
            self.write_index(staged)
        })();
        if result.is_err() {
            for path in written.iter().rev() {
                let _ = fs::remove_file(path);
            }
            for dir in created.iter().rev() {
                let _ = fs::remove_dir(dir);
            }
        }
        result
    }

    fn write_index(&self, state: &State) -> Result<(), RegistryError> {
        let Some(root) = &self.root else { return Ok(()) };
        let index: BTreeMap<String, IndexEntry> = state
            .heads
            .keys()
            .filter_map(|id| state.head_record(id))
            .map(|r| {
                (
                    r.id.to_string(),
                    IndexEntry { version: r.version, digest: r.content_digest.clone(), status: r.status },
                )
            })
            .collect();
        write_atomic(&root.join("registry").join("index.json"), &canonical::canonical_bytes(&index))
    }

    pub fn current_heads(&self) -> BTreeMap<ArtifactId, HeadRef> {
        self.state.read().unwrap().head_refs()
    }

    pub fn current_snapshot_id(&self) -> String {
        snapshot_id_of(&self.current_heads())
    }

    /// Canonical bytes of the current heads map.
    pub fn dump_heads(&self) -> Vec<u8> {
        canonical::canonical_bytes(&self.current_heads())
    }

    pub fn take_snapshot(&self, episode: u64) -> StateSnapshot {
        let heads = self.current_heads();
        let snapshot_id = snapshot_id_of(&heads);
        let mut snaps = self.snapshots.write().unwrap();
        if let Some(existing) = snaps.get(&snapshot_id) {
            return existing.clone();
        }
        let snap = StateSnapshot { snapshot_id: snapshot_id.clone(), heads, episode_index: episode, created_at: self.clock.now() };
        if let Some(root) = &self.root {
            let path = root.join("snapshots").join(format!("{snapshot_id}.json"));
            // A snapshot that fails to persist still exists in memory for this process.
            let _ = write_atomic(&path, &canonical::canonical_bytes(&snap));
        }
        snaps.insert(snapshot_id, snap.clone());
        snap
    }

    pub fn snapshot(&self, snapshot_id: &str) -> Result<StateSnapshot, RegistryError> {
        self.snapshots
            .read()
            .unwrap()
            .get(snapshot_id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownSnapshot(snapshot_id.to_string()))
    }

    pub fn list_snapshots(&self) -> Vec<StateSnapshot> {
        let mut out: Vec<_> = self.snapshots.read().unwrap().values().cloned().collect();
        out.sort_by(|a, b| (a.episode_index, &a.created_at, &a.snapshot_id).cmp(&(b.episode_index, &b.created_at, &b.snapshot_id)));
        out
    }

    /// View of the current heads.
    pub fn current_view(&self) -> StateView {
        let state = self.state.read().unwrap();
        let records: BTreeMap<_, _> = state
            .heads
            .keys()
            .filter_map(|id| state.head_record(id).map(|r| (id.clone(), Arc::clone(r))))
            .collect();
        let mut view = StateView { snapshot_id: String::new(), records };
        view.snapshot_id = snapshot_id_of(&view.heads());
        view
    }

    /// Frozen view of the registry at a recorded snapshot.
    pub fn view(&self, snapshot_id: &str) -> Result<StateView, RegistryError> {
        let snap = self.snapshot(snapshot_id)?;
        let state = self.state.read().unwrap();
        let records = snap
            .heads
            .iter()
            .map(|(id, h)| {
                let rec = state.histories.get(id).and_then(|hist| hist.get(h.version as usize - 1)).ok_or_else(|| {
                    RegistryError::StorageFailure(format!("snapshot references missing `{id}` v{}", h.version))
                })?;
                Ok((id.clone(), Arc::clone(rec)))
            })
            .collect::<Result<_, RegistryError>>()?;
        Ok(StateView { snapshot_id: snap.snapshot_id, records })
    }

    /// Resets every head pointer to the snapshot's heads. Later versions stay
    /// stored; ids absent from the snapshot stop being heads.
    pub fn restore_snapshot(&self, snapshot_id: &str) -> Result<StateSnapshot, RegistryError> {
        let snap = self.snapshot(snapshot_id)?;
        {
            let mut guard = self.state.write().unwrap();
            let mut staged = guard.clone();
            staged.heads.clear();
            for (id, h) in &snap.heads {
                let ok = staged
                    .histories
                    .get(id)
                    .and_then(|hist| hist.get(h.version as usize - 1))
                    .is_some_and(|r| r.content_digest == h.digest);
                if !ok {
                    return Err(RegistryError::StorageFailure(format!("snapshot head `{id}` v{} not stored", h.version)));
                }
                staged.heads.insert(id.clone(), h.version);
            }
            self.write_index(&staged)?;
            *guard = staged;
        }
        Ok(self.take_snapshot(snap.episode_index))
    }

    pub fn diff_snapshots(&self, a: &str, b: &str) -> Result<ChangeSet, RegistryError> {
        let va = self.view(a)?;
        let vb = self.view(b)?;
        Ok(diff_views(&va, &vb))
    }
}

pub fn diff_views(a: &StateView, b: &StateView) -> ChangeSet {
    let mut cs = ChangeSet::default();
    let ids: BTreeSet<&ArtifactId> = a.records.keys().chain(b.records.keys()).collect();
    for id in ids {
        match (a.get(id), b.get(id)) {
            (None, Some(_)) => cs.added.push(id.clone()),
            (Some(_), None) => cs.removed.push(id.clone()),
            (Some(ra), Some(rb)) if ra.version != rb.version || ra.content_digest != rb.content_digest => {
                if ra.is_active() && !rb.is_active() {
                    cs.pruned.push(id.clone());
                } else {
                    cs.modified.push((id.clone(), ra.version, rb.version));
                }
            }
            _ => {}
        }
    }
    cs
}

fn stage(
    state: &mut State,
    op: &WriteOp,
    provenance: Option<u64>,
    episode: u64,
) -> Result<Arc<VersionedArtifact>, RegistryError> {
    let id = op.id();
    let (payload, status) = match op {
        WriteOp::Put { id, payload } => {
            if !id.is_valid() {
                return Err(RegistryError::InvalidPayload { id: id.to_string(), reason: "name does not match the identifier grammar".into() });
            }
            if state.histories.contains_key(id) {
                return Err(RegistryError::DuplicateId(id.clone()));
            }
            check_payload(id, payload)?;
            (payload.clone(), ArtifactStatus::Active)
        }
        WriteOp::Patch { id, base_version, payload } => {
            let head = state.head_record(id).ok_or_else(|| RegistryError::NotFound(id.clone()))?;
            if !head.is_active() {
                return Err(RegistryError::ArtifactPruned(id.clone()));
            }
            if *base_version != head.version {
                return Err(RegistryError::StaleBase { id: id.clone(), base: *base_version, head: head.version });
            }
            check_payload(id, payload)?;
            (payload.clone(), ArtifactStatus::Active)
        }
        WriteOp::Prune { id } => {
            let head = state.head_record(id).ok_or_else(|| RegistryError::NotFound(id.clone()))?;
            if !head.is_active() {
                return Err(RegistryError::AlreadyPruned(id.clone()));
            }
            (head.payload.clone(), ArtifactStatus::Pruned)
        }
    };
    let history = state.histories.entry(id.clone()).or_default();
    // Versions stay dense even when a restore moved the head below the newest
    // stored version: the new version always follows the last stored one.
    let version = history.len() as u32 + 1;
    let rec = Arc::new(VersionedArtifact {
        id: id.clone(),
        version,
        content_digest: payload.digest(),
        payload,
        status,
        provenance_ref: provenance,
        created_episode: episode,
    });
    history.push(Arc::clone(&rec));
    state.heads.insert(id.clone(), version);
    Ok(rec)
}

fn check_payload(id: &ArtifactId, payload: &Payload) -> Result<(), RegistryError> {
    if payload.kind() != id.kind {
        return Err(RegistryError::InvalidPayload {
            id: id.to_string(),
            reason: format!("{} payload stored under kind {}", payload.kind(), id.kind),
        });
    }
    payload
        .validate()
        .map_err(|reason| RegistryError::InvalidPayload { id: id.to_string(), reason })
}

fn load_history(dir: &Path, id: &ArtifactId) -> Result<Vec<Arc<VersionedArtifact>>, RegistryError> {
    let mut history = Vec::new();
    for version in 1.. {
        let artifact = dir.join(format!("v{version}.artifact"));
        if !artifact.exists() {
            break;
        }
        let bytes = fs::read(&artifact).map_err(RegistryError::storage)?;
        let payload: Payload = serde_json::from_slice(&bytes).map_err(RegistryError::storage)?;
        let meta: VersionMeta = serde_json::from_slice(
            &fs::read(dir.join(format!("v{version}.meta.json"))).map_err(RegistryError::storage)?,
        )
        .map_err(RegistryError::storage)?;
        let digest = canonical::sha256_hex(&bytes);
        if digest != meta.content_digest || payload.digest() != digest {
            return Err(RegistryError::StorageFailure(format!("content digest mismatch for `{id}` v{version}")));
        }
        history.push(Arc::new(VersionedArtifact {
            id: id.clone(),
            version,
            content_digest: digest,
            payload,
            status: meta.status,
            provenance_ref: meta.provenance_ref,
            created_episode: meta.created_episode,
        }));
    }
    if history.is_empty() {
        return Err(RegistryError::StorageFailure(format!("`{id}` has a directory but no versions")));
    }
    Ok(history)
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| RegistryError::StorageFailure(format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(RegistryError::storage)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(RegistryError::storage)?;
    fs::rename(&tmp, path).map_err(RegistryError::storage)
}

#[cfg(test)]
mod tests;
