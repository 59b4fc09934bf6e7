use super::*;
use crate::clock::ClockKind;
use crate::evidence::{StepKind, TaskInput};
use crate::governance::{AutoApprove, AutoReject, DeferAll};
use crate::harness::analyst::PARSER_TOOL;
use crate::harness::canonical_drift_suite;
use crate::registry::diff_views;
use crate::remote::CannedTransport;
use crate::runner::{run_episodes, EvolverSpec, RunConfig, Runtime, TaskSource};

fn sandbox() -> Sandbox {
    Sandbox::with_defaults().unwrap()
}

/// Runtime holding `n` episodes of the canonical suite, solved without
/// evolution; episodes from 10 on fail on the renamed field.
fn drifted(n: u64, sb: &Sandbox) -> Runtime {
    let env = canonical_drift_suite(5);
    let mut cfg = RunConfig::new(env.clone(), n, 5);
    cfg.evolver = EvolverSpec::None;
    let rt = Runtime::in_memory(ClockKind::Logical.build());
    run_episodes(&rt, sb, &cfg, &TaskSource::Drift { env, seed: 5 }, &AutoReject, None).unwrap();
    rt
}

fn env<'a>(rt: &'a Runtime, sb: &'a Sandbox, reviewer: &'a dyn Reviewer, mode: GateMode) -> StepEnv<'a> {
    StepEnv {
        registry: &rt.registry,
        audit: &rt.audit,
        sandbox: sb,
        reviews: &rt.reviews,
        reviewer,
        gate_mode: mode,
        episode: rt.evidence.len() - 1,
        dry_run: false,
    }
}

fn step(rt: &Runtime, e: &StepEnv<'_>, budget: &EvolveBudget, backend: &dyn EvolverBackend) -> Result<StepOutcome, EvolveError> {
    run_evolution_step(e, &rt.evidence, rt.evidence.len() - 1, 10, budget, backend)
}

#[test]
fn clean_window_is_a_no_op() {
    let sb = sandbox();
    let rt = drifted(10, &sb);
    let before = rt.registry.current_snapshot_id();
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert!(out.diagnosis.as_ref().unwrap().is_empty());
    assert!(out.plan.is_none() && out.candidate.is_none());
    assert_eq!(out.c(), 0);
    assert_eq!(out.budget_used.backend_calls, 1);
    assert!(rt.audit.is_empty());
    assert_eq!(rt.registry.current_snapshot_id(), before);
}

#[test]
fn drift_window_commits_parser_and_schema() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert_eq!(out.c(), 1);
    assert_eq!(out.synthesis_attempts, 1);
    assert_eq!(out.diagnosis.as_ref().unwrap().objective, "schema drift: latency_ms renamed");

    let a = rt.registry.view(&out.snapshot_before).unwrap();
    let b = rt.registry.view(&out.snapshot_after).unwrap();
    let diff = diff_views(&a, &b).only(&[ArtifactKind::Tool, ArtifactKind::Knowledge]);
    assert_eq!(diff.added, vec![ArtifactId::tool(PARSER_TOOL)]);
    assert_eq!(diff.modified, vec![(ArtifactId::knowledge("log_schema"), 1, 2)]);
    assert!(diff.pruned.is_empty());
    let checks = diff_views(&a, &b).only(&[ArtifactKind::Validation]);
    assert_eq!(checks.added.len(), 2);

    let cand = out.candidate.unwrap();
    let plan = out.plan.unwrap();
    assert_eq!(cand.writes.len(), plan.actions.len());
    for (w, act) in cand.writes.iter().zip(&plan.actions) {
        assert_eq!(w.id, act.target_id());
        assert_eq!(w.operator, act.operator);
    }
    assert_eq!(cand.writes[1].base_version, Some(1));
    assert_eq!(plan.actions[1].depends_on, vec![0]);
    assert_eq!(cand.plan_ref, plan.digest());
    assert!(!cand.provenance.created_at.is_empty());

    let kinds: Vec<_> = rt.audit.records().iter().map(|r| r.record_kind).collect();
    assert_eq!(kinds, vec![AuditRecordKind::Proposal, AuditRecordKind::Verification, AuditRecordKind::Commit]);
    assert!(rt.audit.verify());
}

#[test]
fn always_broken_tool_exhausts_repairs() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let before = rt.registry.current_snapshot_id();
    let backend = ScriptedEvolver::new(DefectSchedule::AlwaysBroken);
    let budget = EvolveBudget { max_repair_attempts: 3, ..EvolveBudget::default() };
    let out = step(&rt, &env(&rt, &sb, &AutoApprove, GateMode::Auto), &budget, &backend).unwrap();
    assert_eq!(out.synthesis_attempts, 4);
    assert_eq!(out.repairs_used, 3);
    assert_eq!(out.c(), 0);
    assert!(!out.report.as_ref().unwrap().overall);
    assert_eq!(rt.registry.current_snapshot_id(), before);
    assert_eq!(out.snapshot_after, before);
    assert_eq!(rt.audit.count(AuditRecordKind::Verification), 4);
    assert_eq!(rt.audit.count(AuditRecordKind::Rejection), 1);
    assert_eq!(rt.audit.count(AuditRecordKind::Commit), 0);
    let failed = out.report.unwrap();
    assert!(failed.failures().any(|c| c.detail.contains("AttributeError")));
}

#[test]
fn syntax_defects_are_repaired_within_budget() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let backend = ScriptedEvolver::new(DefectSchedule::FirstAttempts { n: 2 });
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &backend).unwrap();
    assert_eq!((out.synthesis_attempts, out.repairs_used, out.c()), (3, 2, 1));

    let rt = drifted(20, &sb);
    let backend = ScriptedEvolver::new(DefectSchedule::FirstAttempts { n: 2 });
    let budget = EvolveBudget { max_repair_attempts: 1, ..EvolveBudget::default() };
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &budget, &backend).unwrap();
    assert_eq!((out.synthesis_attempts, out.c()), (2, 0));
}

#[test]
fn exhausted_call_budget_is_audited_and_reported() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let before = rt.registry.current_snapshot_id();
    let budget = EvolveBudget { max_backend_calls: 2, ..EvolveBudget::default() };
    let err = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &budget, &ScriptedEvolver::default()).unwrap_err();
    assert!(matches!(err, EvolveError::BudgetExhausted(_)));
    assert_eq!(rt.audit.count(AuditRecordKind::Proposal), 1);
    assert_eq!(rt.audit.count(AuditRecordKind::Rejection), 1);
    assert_eq!(rt.registry.current_snapshot_id(), before);

    let rt = drifted(20, &sb);
    let budget = EvolveBudget { max_sandbox_executions: 1, ..EvolveBudget::default() };
    let err = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &budget, &ScriptedEvolver::default()).unwrap_err();
    assert!(matches!(err, EvolveError::BudgetExhausted(_)));
}

#[test]
fn dry_run_writes_nothing() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let before = rt.registry.current_snapshot_id();
    let mut e = env(&rt, &sb, &AutoReject, GateMode::Auto);
    e.dry_run = true;
    let out = step(&rt, &e, &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert!(out.report.unwrap().overall);
    assert!(out.decision.is_none());
    assert!(rt.audit.is_empty());
    assert_eq!(rt.registry.current_snapshot_id(), before);
}

#[test]
fn human_gate_waits_for_or_follows_the_reviewer() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let before = rt.registry.current_snapshot_id();
    let out = step(&rt, &env(&rt, &sb, &DeferAll, GateMode::Human), &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert!(out.decision.is_none());
    assert_eq!(rt.reviews.list().len(), 1);
    assert_eq!(out.ticket.unwrap().status, crate::governance::TicketStatus::Pending);
    assert_eq!(rt.registry.current_snapshot_id(), before);

    let rt = drifted(20, &sb);
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Human), &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert_eq!(out.c(), 0);
    assert_eq!(rt.registry.current_snapshot_id(), before);

    let rt = drifted(20, &sb);
    let out = step(&rt, &env(&rt, &sb, &AutoApprove, GateMode::Human), &EvolveBudget::default(), &ScriptedEvolver::default()).unwrap();
    assert_eq!(out.c(), 1);
    assert_eq!(rt.audit.count(AuditRecordKind::Review), 1);
}

#[test]
fn second_step_after_commit_is_a_no_op() {
    let sb = sandbox();
    let env_ = canonical_drift_suite(5);
    let cfg = RunConfig::new(env_.clone(), 40, 5);
    let rt = Runtime::in_memory(ClockKind::Logical.build());
    let backend = ScriptedEvolver::default();
    let report = run_episodes(&rt, &sb, &cfg, &TaskSource::Drift { env: env_, seed: 5 }, &AutoReject, Some(&backend)).unwrap();
    let cs: Vec<u8> = report.steps.iter().map(|s| s.c).collect();
    assert_eq!(cs, vec![0, 1, 0, 0]);
    assert_eq!(backend.sessions(), 1);
}

fn failing_with(episode: u64, text: &str) -> Trajectory {
    let mut t = Trajectory::new(TaskInput { episode, description: "call the profile api".into(), attachments: Value::Null, check_count: 1 });
    t.push(StepKind::ToolCall, json!({"name": "show_profile", "arguments": {}}), false);
    t.push(StepKind::ToolResult, json!({"success": false, "error": text}), true);
    t.usage.steps = 1;
    t.set_score(0, 1).unwrap();
    t
}

#[test]
fn unauthorized_window_plans_the_auth_bundle() {
    let rt = Runtime::in_memory(ClockKind::Logical.build());
    crate::runner::seed_state(&rt.registry).unwrap();
    let window: Vec<Arc<Trajectory>> =
        (0..4).map(|e| Arc::new(failing_with(e, "HTTP 401 Unauthorized: missing bearer token"))).collect();
    let view = rt.registry.current_view();
    let backend = ScriptedEvolver::default();
    let d = backend.diagnose(&window, &view, WindowRef { end: 3, w: 4 }).unwrap();
    assert_eq!(d.signatures.len(), 1);
    assert_eq!(d.signatures[0].pattern, "401");
    assert_eq!(d.confidence, 1.0);
    let p = backend.plan(&d, &view).unwrap();
    validate_plan(&p, &view).unwrap();
    let targets: Vec<String> = p.actions.iter().map(|a| a.target.clone()).collect();
    assert_eq!(targets, ["discover_api_spec", "manage_auth_token", "systematic_api_exploration", "authentication_workflow"]);
    assert!(p.actions.iter().all(|a| a.operator == EditOperator::Add));
    let deps: Vec<Vec<usize>> = p.actions.iter().map(|a| a.depends_on.clone()).collect();
    assert_eq!(deps, vec![vec![], vec![], vec![0], vec![]]);

    let cand = backend.synthesize(&p, &view, 0, None).unwrap();
    let report = governance::verify(&cand, &view, &sandbox()).unwrap();
    assert!(report.overall, "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn single_occurrences_are_ignored() {
    let view = Runtime::in_memory(ClockKind::Logical.build()).registry.current_view();
    let window = vec![Arc::new(failing_with(0, "timeout after 30s"))];
    let d = ScriptedEvolver::default().diagnose(&window, &view, WindowRef { end: 0, w: 1 }).unwrap();
    assert!(d.is_empty());
    let window: Vec<_> = (0..3).map(|e| Arc::new(failing_with(e, "timeout after 30s"))).collect();
    let d = ScriptedEvolver::default().diagnose(&window, &view, WindowRef { end: 2, w: 3 }).unwrap();
    let p = ScriptedEvolver::default().plan(&d, &view).unwrap();
    assert_eq!(p.actions.len(), 1);
    assert_eq!(p.actions[0].target, "lesson_timeout");
}

fn action(op: EditOperator, kind: ArtifactKind, target: &str, deps: Vec<usize>) -> EditAction {
    EditAction { operator: op, target_kind: kind, target: target.into(), spec: Value::Null, depends_on: deps, rationale: String::new() }
}

fn rule_of(plan: &EditPlan, view: &StateView) -> &'static str {
    match validate_plan(plan, view) {
        Err(EvolveError::InvalidPlan { rule, .. }) => rule,
        other => panic!("expected an invalid plan, got {other:?}"),
    }
}

#[test]
fn plan_rules() {
    let rt = Runtime::in_memory(ClockKind::Logical.build());
    crate::runner::seed_state(&rt.registry).unwrap();
    let tool = schema::parser_tool(&schema::FieldTable::default(), vec![]);
    rt.registry.put_artifact(ArtifactId::tool("old_tool"), Payload::Tool(tool), None, 0).unwrap();
    rt.registry.prune_artifact(ArtifactId::tool("old_tool"), None, 0).unwrap();
    let view = rt.registry.current_view();
    let plan = |actions| EditPlan { diagnosis_ref: "d".into(), actions, ordering_note: String::new() };
    use ArtifactKind::{Knowledge, Tool};
    use EditOperator::{Add, Patch, Prune};

    assert_eq!(rule_of(&plan(vec![]), &view), "non_empty");
    let forward = plan(vec![action(Add, Tool, "a_tool", vec![1]), action(Add, Tool, "b_tool", vec![])]);
    assert_eq!(rule_of(&forward, &view), "backward_dependencies");
    let selfdep = plan(vec![action(Add, Tool, "a_tool", vec![0])]);
    assert_eq!(rule_of(&selfdep, &view), "backward_dependencies");
    assert_eq!(rule_of(&plan(vec![action(Add, Tool, "Bad-Name", vec![])]), &view), "valid_identifiers");
    let dup = plan(vec![action(Add, Tool, "a_tool", vec![]), action(Add, Tool, "a_tool", vec![])]);
    assert_eq!(rule_of(&dup, &view), "unique_targets");
    assert_eq!(rule_of(&plan(vec![action(Add, Knowledge, "log_schema", vec![])]), &view), "fresh_add_targets");
    assert_eq!(rule_of(&plan(vec![action(Patch, Tool, "old_tool", vec![])]), &view), "active_targets");
    assert_eq!(rule_of(&plan(vec![action(Prune, Tool, "missing_tool", vec![])]), &view), "active_targets");
    // Re-adding a pruned id is not fresh either.
    assert_eq!(rule_of(&plan(vec![action(Add, Tool, "old_tool", vec![])]), &view), "fresh_add_targets");

    let ok = plan(vec![action(Add, Tool, "a_tool", vec![]), action(Patch, Knowledge, "log_schema", vec![0])]);
    validate_plan(&ok, &view).unwrap();
}

/// Replies a remote backend would give, taken from the scripted evolver.
fn scripted_replies(rt: &Runtime) -> (Value, Value, Value) {
    let view = rt.registry.current_view();
    let window = rt.evidence.evidence_window(rt.evidence.len() - 1, 10).unwrap();
    let s = ScriptedEvolver::default();
    let d = s.diagnose(&window, &view, WindowRef { end: rt.evidence.len() - 1, w: 10 }).unwrap();
    let p = s.plan(&d, &view).unwrap();
    let c = s.synthesize(&p, &view, 0, None).unwrap();
    (serde_json::to_value(d).unwrap(), serde_json::to_value(p).unwrap(), serde_json::to_value(c).unwrap())
}

#[test]
fn remote_backend_round_trip() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let (d, p, c) = scripted_replies(&rt);
    let transport = Arc::new(CannedTransport::new([Ok(d), Ok(p), Ok(c)]));
    let backend = RemoteEvolver::new(transport.clone(), RemoteEvolverParams::default());
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &backend).unwrap();
    assert_eq!(out.c(), 1);
    let reqs = transport.requests();
    let routes: Vec<&str> = reqs.iter().map(|(r, _)| r.as_str()).collect();
    assert_eq!(routes, ["diagnose", "plan", "synthesize"]);
    assert_eq!(reqs[0].1["sampling_temperature"], json!(0.7));
    assert_eq!(reqs[2].1["max_output_tokens"], json!(8192));
    assert_eq!(reqs[2].1["attempt"], json!(0));
}

#[test]
fn remote_backend_failures() {
    let sb = sandbox();
    let rt = drifted(20, &sb);
    let (d, p, mut c) = scripted_replies(&rt);

    let down = RemoteEvolver::new(Arc::new(CannedTransport::new([Err("connection refused".into())])), Default::default());
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &down).unwrap();
    assert_eq!(out.c(), 0);
    assert!(out.note.unwrap().contains("backend unavailable"));

    let mut bad = d.clone();
    bad["confidence"] = json!(1.5);
    let view = rt.registry.current_view();
    let window = rt.evidence.evidence_window(19, 10).unwrap();
    let r = RemoteEvolver::new(Arc::new(CannedTransport::new([Ok(bad)])), Default::default());
    assert!(matches!(r.diagnose(&window, &view, WindowRef { end: 19, w: 10 }), Err(EvolveError::MalformedBackendReply(_))));
    let r = RemoteEvolver::new(Arc::new(CannedTransport::new([Ok(json!({"nope": 1}))])), Default::default());
    assert!(matches!(r.diagnose(&window, &view, WindowRef { end: 19, w: 10 }), Err(EvolveError::MalformedBackendReply(_))));

    // A candidate whose writes do not line up with the plan.
    c["writes"].as_array_mut().unwrap().pop();
    let rt = drifted(20, &sb);
    let r = RemoteEvolver::new(Arc::new(CannedTransport::new([Ok(d), Ok(p), Ok(c)])), Default::default());
    let out = step(&rt, &env(&rt, &sb, &AutoReject, GateMode::Auto), &EvolveBudget::default(), &r).unwrap();
    assert_eq!(out.c(), 0);
    assert!(out.note.unwrap().contains("malformed backend reply"));
    assert_eq!(rt.audit.count(AuditRecordKind::Rejection), 1);
}

#[test]
fn budget_meter_counts() {
    let budget = EvolveBudget { max_backend_calls: 2, max_sandbox_executions: 5, max_repair_attempts: 0 };
    let mut m = BudgetMeter::default();
    m.charge_call(&budget, "a").unwrap();
    m.charge_call(&budget, "b").unwrap();
    assert!(m.charge_call(&budget, "c").is_err());
    m.charge_sandbox(&budget, 5).unwrap();
    assert!(m.charge_sandbox(&budget, 1).is_err());
    assert_eq!(m, BudgetMeter { backend_calls: 2, sandbox_executions: 5 });
}
