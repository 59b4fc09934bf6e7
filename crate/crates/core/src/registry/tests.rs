use super::*;
use serde_json::json;

fn echo_tool(entry: &str) -> Payload {
    Payload::Tool(ToolSpec {
        description: "echo arguments".into(),
        parameters: vec![ToolParam { name: "x".into(), type_tag: TypeTag::Int, required: false }],
        entrypoint: entry.into(),
        attached_checks: vec![],
    })
}

fn fact(body: &str, triggers: &[&str]) -> Payload {
    Payload::Knowledge(KnowledgeDoc::fact("note", body, triggers))
}

#[test]
fn put_returns_version_one_active() {
    let reg = Registry::default();
    let rec = reg.put_artifact(ArtifactId::tool("echo"), echo_tool("print(1)"), None, 0).unwrap();
    assert_eq!(rec.version, 1);
    assert!(rec.is_active());
    let err = reg.put_artifact(ArtifactId::tool("echo"), echo_tool("print(2)"), None, 0).unwrap_err();
    assert_eq!(err, RegistryError::DuplicateId(ArtifactId::tool("echo")));
}

#[test]
fn knowledge_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let id = ArtifactId::knowledge("appworld_authentication");
    let payload = fact("call login first, then pass access_token on every request", &["login", "token"]);
    {
        let reg = Registry::open(dir.path(), Arc::new(SystemClock)).unwrap();
        let rec = reg.put_artifact(id.clone(), payload.clone(), Some(0), 3).unwrap();
        assert_eq!(rec.version, 1);
    }
    let reg = Registry::open(dir.path(), Arc::new(SystemClock)).unwrap();
    let back = reg.get_artifact(&id, None).unwrap();
    assert_eq!(back.payload.canonical_bytes(), payload.canonical_bytes());
    let on_disk = std::fs::read(dir.path().join("registry/knowledge/appworld_authentication/v1.artifact")).unwrap();
    assert_eq!(on_disk, payload.canonical_bytes());
    assert_eq!(back.content_digest, canonical::sha256_hex(&on_disk));
    assert_eq!(back.created_episode, 3);
}

#[test]
fn invalid_payloads_rejected() {
    let reg = Registry::default();
    let err = reg.put_artifact(ArtifactId::tool("empty"), echo_tool(""), None, 0).unwrap_err();
    assert!(matches!(err, RegistryError::InvalidPayload { .. }));
    let err = reg.put_artifact(ArtifactId::knowledge("wrong"), echo_tool("x"), None, 0).unwrap_err();
    assert!(matches!(err, RegistryError::InvalidPayload { .. }));
    let err = reg.put_artifact(ArtifactId::tool("Bad-Name"), echo_tool("x"), None, 0).unwrap_err();
    assert!(matches!(err, RegistryError::InvalidPayload { .. }));
    assert!(reg.ids().is_empty());
}

#[test]
fn get_semantics() {
    let reg = Registry::default();
    let id = ArtifactId::tool("echo");
    assert_eq!(reg.get_artifact(&id, None).unwrap_err(), RegistryError::NotFound(id.clone()));
    reg.put_artifact(id.clone(), echo_tool("v1"), None, 0).unwrap();
    reg.patch_artifact(id.clone(), 1, echo_tool("v2"), None, 1).unwrap();
    assert_eq!(reg.get_artifact(&id, Some(1)).unwrap().payload, echo_tool("v1"));
    assert_eq!(reg.get_artifact(&id, None).unwrap().payload, echo_tool("v2"));
    assert!(matches!(reg.get_artifact(&id, Some(3)), Err(RegistryError::VersionOutOfRange { .. })));
    assert!(matches!(reg.get_artifact(&id, Some(0)), Err(RegistryError::VersionOutOfRange { .. })));
}

#[test]
fn patch_checks_base_version() {
    let reg = Registry::default();
    let id = ArtifactId::tool("echo");
    reg.put_artifact(id.clone(), echo_tool("v1"), None, 0).unwrap();
    assert_eq!(reg.patch_artifact(id.clone(), 1, echo_tool("v2"), None, 0).unwrap().version, 2);
    let before = reg.dump_heads();
    let err = reg.patch_artifact(id.clone(), 1, echo_tool("v3"), None, 0).unwrap_err();
    assert_eq!(err, RegistryError::StaleBase { id: id.clone(), base: 1, head: 2 });
    assert_eq!(reg.dump_heads(), before);
    assert_eq!(reg.history(&id).len(), 2);
}

#[test]
fn prune_is_logical() {
    let reg = Registry::default();
    let id = ArtifactId::knowledge("note");
    reg.put_artifact(id.clone(), fact("body", &["x"]), None, 0).unwrap();
    let pruned = reg.prune_artifact(id.clone(), None, 1).unwrap();
    assert_eq!(pruned.status, ArtifactStatus::Pruned);
    assert_eq!(pruned.version, 2);
    let got = reg.get_artifact(&id, None).unwrap();
    assert_eq!(got.status, ArtifactStatus::Pruned);
    assert_eq!(got.payload, fact("body", &["x"]));
    assert_eq!(reg.prune_artifact(id.clone(), None, 1).unwrap_err(), RegistryError::AlreadyPruned(id.clone()));
    assert_eq!(
        reg.patch_artifact(id.clone(), 2, fact("b2", &["x"]), None, 1).unwrap_err(),
        RegistryError::ArtifactPruned(id.clone())
    );
    assert_eq!(reg.put_artifact(id.clone(), fact("again", &["x"]), None, 1).unwrap_err(), RegistryError::DuplicateId(id));
}

#[test]
fn empty_snapshot_is_digest_of_empty_sequence() {
    let a = Registry::default().take_snapshot(0);
    let b = Registry::default().take_snapshot(0);
    assert_eq!(a.snapshot_id, b.snapshot_id);
    assert_eq!(a.snapshot_id, canonical::sha256_hex(b"[]"));
}

#[test]
fn snapshots_without_writes_share_id() {
    let reg = Registry::default();
    reg.put_artifact(ArtifactId::tool("echo"), echo_tool("x"), None, 0).unwrap();
    let a = reg.take_snapshot(0);
    let b = reg.take_snapshot(5);
    assert_eq!(a.snapshot_id, b.snapshot_id);
    assert_eq!(b.episode_index, 0, "snapshots are immutable once taken");
}

#[test]
fn snapshot_restore_snapshot_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path(), Arc::new(SystemClock)).unwrap();
    let id = ArtifactId::tool("echo");
    reg.put_artifact(id.clone(), echo_tool("x"), None, 0).unwrap();
    let s1 = reg.take_snapshot(0);
    reg.patch_artifact(id.clone(), 1, echo_tool("y"), None, 1).unwrap();
    let restored = reg.restore_snapshot(&s1.snapshot_id).unwrap();
    assert_eq!(restored.snapshot_id, s1.snapshot_id);

    // Recompute the id independently from the dumped file.
    let dumped: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(format!("snapshots/{}.json", s1.snapshot_id))).unwrap()).unwrap();
    let mut triples: Vec<serde_json::Value> = dumped["heads"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| json!([k, v["version"], v["digest"]]))
        .collect();
    triples.sort_by_key(|t| t[0].as_str().unwrap().to_string());
    let recomputed = canonical::sha256_hex(serde_json::to_string(&triples).unwrap().as_bytes());
    assert_eq!(recomputed, s1.snapshot_id);
    assert_eq!(reg.take_snapshot(2).snapshot_id, s1.snapshot_id);
}

#[test]
fn restore_unknown_and_prior() {
    let reg = Registry::default();
    assert_eq!(reg.restore_snapshot("nope").unwrap_err(), RegistryError::UnknownSnapshot("nope".into()));
    let s0 = reg.take_snapshot(0);
    reg.put_artifact(ArtifactId::tool("echo"), echo_tool("x"), None, 0).unwrap();
    let s1 = reg.take_snapshot(1);
    reg.restore_snapshot(&s0.snapshot_id).unwrap();
    let now = reg.take_snapshot(2);
    assert!(reg.diff_snapshots(&s0.snapshot_id, &now.snapshot_id).unwrap().is_empty());
    let cs = reg.diff_snapshots(&s1.snapshot_id, &now.snapshot_id).unwrap();
    assert_eq!(cs.removed, vec![ArtifactId::tool("echo")]);
    // The rolled-back name keeps its history and cannot be re-created.
    assert!(matches!(
        reg.put_artifact(ArtifactId::tool("echo"), echo_tool("z"), None, 3),
        Err(RegistryError::DuplicateId(_))
    ));
}

#[test]
fn patch_after_restore_keeps_versions_dense() {
    let reg = Registry::default();
    let id = ArtifactId::tool("echo");
    reg.put_artifact(id.clone(), echo_tool("v1"), None, 0).unwrap();
    let s1 = reg.take_snapshot(0);
    reg.patch_artifact(id.clone(), 1, echo_tool("v2"), None, 0).unwrap();
    reg.restore_snapshot(&s1.snapshot_id).unwrap();
    let rec = reg.patch_artifact(id.clone(), 1, echo_tool("v3"), None, 0).unwrap();
    assert_eq!(rec.version, 3);
    let versions: Vec<u32> = reg.history(&id).iter().map(|r| r.version).collect();
    assert_eq!(versions, vec![1, 2, 3]);
}

#[test]
fn diff_classifies_changes() {
    let reg = Registry::default();
    let s0 = reg.take_snapshot(0);
    reg.put_artifact(ArtifactId::tool("echo"), echo_tool("x"), None, 0).unwrap();
    reg.put_artifact(ArtifactId::knowledge("note"), fact("b", &["x"]), None, 0).unwrap();
    let s1 = reg.take_snapshot(1);
    let cs = reg.diff_snapshots(&s0.snapshot_id, &s1.snapshot_id).unwrap();
    assert_eq!(cs.added.len(), 2);
    assert!(reg.diff_snapshots(&s1.snapshot_id, &s1.snapshot_id).unwrap().is_empty());

    reg.patch_artifact(ArtifactId::tool("echo"), 1, echo_tool("y"), None, 1).unwrap();
    reg.prune_artifact(ArtifactId::knowledge("note"), None, 1).unwrap();
    let s2 = reg.take_snapshot(2);
    let cs = reg.diff_snapshots(&s1.snapshot_id, &s2.snapshot_id).unwrap();
    assert_eq!(cs.modified, vec![(ArtifactId::tool("echo"), 1, 2)]);
    assert_eq!(cs.pruned, vec![ArtifactId::knowledge("note")]);
    assert!(cs.added.is_empty() && cs.removed.is_empty());
}

#[test]
fn transaction_is_all_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path(), Arc::new(SystemClock)).unwrap();
    reg.put_artifact(ArtifactId::tool("echo"), echo_tool("x"), None, 0).unwrap();
    let before = reg.dump_heads();
    let ops = vec![
        WriteOp::Put { id: ArtifactId::tool("a"), payload: echo_tool("a") },
        WriteOp::Patch { id: ArtifactId::tool("echo"), base_version: 1, payload: echo_tool("y") },
        WriteOp::Put { id: ArtifactId::tool("b"), payload: echo_tool("b") },
    ];
    reg.inject_write_fault(2);
    assert!(matches!(reg.apply(&ops, Some(0), 1), Err(RegistryError::StorageFailure(_))));
    assert_eq!(reg.dump_heads(), before);
    assert!(!dir.path().join("registry/tool/a").exists());
    assert!(!dir.path().join("registry/tool/echo/v2.artifact").exists());
    // A validation failure part-way leaves nothing behind either.
    let bad = vec![
        WriteOp::Put { id: ArtifactId::tool("a"), payload: echo_tool("a") },
        WriteOp::Patch { id: ArtifactId::tool("echo"), base_version: 7, payload: echo_tool("y") },
    ];
    assert!(matches!(reg.apply(&bad, None, 1), Err(RegistryError::StaleBase { .. })));
    assert_eq!(reg.dump_heads(), before);
    // The fault is one-shot.
    assert_eq!(reg.apply(&ops, Some(0), 1).unwrap().len(), 3);
    let reopened = Registry::open(dir.path(), Arc::new(SystemClock)).unwrap();
    assert_eq!(reopened.dump_heads(), reg.dump_heads());
}

#[test]
fn view_and_overlay() {
    let reg = Registry::default();
    reg.put_artifact(ArtifactId::tool("echo"), echo_tool("x"), None, 0).unwrap();
    let snap = reg.take_snapshot(0);
    let view = reg.view(&snap.snapshot_id).unwrap();
    assert_eq!(view.snapshot_id(), snap.snapshot_id);
    assert_eq!(view.active_of_kind(ArtifactKind::Tool).count(), 1);
    let same = view.overlay(std::iter::empty());
    assert_eq!(same.snapshot_id(), snap.snapshot_id);
    assert!(matches!(reg.view("missing"), Err(RegistryError::UnknownSnapshot(_))));
}
