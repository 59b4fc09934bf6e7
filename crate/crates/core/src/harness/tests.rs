use super::*;
use crate::evolver::EvolveBudget;
use crate::sandbox::Sandbox;

fn keys(v: &Value, out: &mut Vec<String>) {
    if let Some(obj) = v.as_object() {
        for (k, child) in obj {
            out.push(k.clone());
            keys(child, out);
        }
    }
}

fn record_keys(task: &GeneratedTask) -> Vec<String> {
    let mut out = Vec::new();
    for r in task.task.attachments["records"].as_array().unwrap() {
        keys(r, &mut out);
    }
    out
}

fn fd(name: &str, ty: FieldType) -> FieldDescriptor {
    FieldDescriptor { name: name.into(), field_type: ty, parent: None, origin: name.into() }
}

#[test]
fn generation_is_deterministic() {
    let env = canonical_drift_suite(4);
    let a = serde_json::to_vec(&generate_episode(&env, 12, 4)).unwrap();
    let b = serde_json::to_vec(&generate_episode(&env, 12, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, serde_json::to_vec(&generate_episode(&env, 12, 5)).unwrap());
}

#[test]
fn records_follow_the_schema_in_force() {
    let env = canonical_drift_suite(1);
    let before = record_keys(&generate_episode(&env, 9, 1));
    assert!(before.iter().any(|k| k == "latency_ms"));
    for t in 10..20 {
        let after = record_keys(&generate_episode(&env, t, 1));
        assert!(!after.iter().any(|k| k == "latency_ms"), "episode {t}");
        assert!(after.iter().any(|k| k == "latency_millis"));
    }
}

#[test]
fn advance_drift_applies_in_order() {
    let schema = vec![fd("endpoint", FieldType::String), fd("status", FieldType::Int), fd("latency_ms", FieldType::Float)];
    let sched = vec![
        ScheduledMutation { episode: 3, mutation: Mutation::Rename { field: "latency_ms".into(), new_name: "lat".into() } },
        ScheduledMutation { episode: 5, mutation: Mutation::Nest { field: "lat".into(), new_parent: "timing".into() } },
    ];
    let env = DriftEnvironment::new(schema.clone(), sched, 4, 0).unwrap();
    assert_eq!(env.advance_drift(2).unwrap().schema, schema);

    // By hand: rename, then nest the renamed field.
    let mut expected = schema.clone();
    expected[2].name = "lat".into();
    expected[2].parent = Some("timing".into());
    let advanced = env.advance_drift(7).unwrap();
    assert_eq!(advanced.schema, expected);
    assert!(advanced.drift_schedule.is_empty());

    let rec = generate_with_schema(&advanced.schema, 4, 7, 0);
    let first = &rec.task.attachments["records"][0];
    assert!(first["timing"]["lat"].is_f64());
    assert!(first.get("latency_ms").is_none());
}

#[test]
fn invalid_schedules_are_refused() {
    let vanished = vec![
        ScheduledMutation { episode: 1, mutation: Mutation::Rename { field: "status".into(), new_name: "code".into() } },
        ScheduledMutation { episode: 2, mutation: Mutation::Nest { field: "status".into(), new_parent: "http".into() } },
    ];
    assert!(matches!(DriftEnvironment::new(base_schema(), vanished, 4, 0), Err(HarnessError::InvalidSchedule(_))));
    let unsorted = vec![
        ScheduledMutation { episode: 4, mutation: Mutation::Rename { field: "status".into(), new_name: "code".into() } },
        ScheduledMutation { episode: 2, mutation: Mutation::Rename { field: "endpoint".into(), new_name: "route".into() } },
    ];
    assert!(DriftEnvironment::new(base_schema(), unsorted, 4, 0).is_err());
    let lossy = vec![ScheduledMutation {
        episode: 1,
        mutation: Mutation::TypeChange { field: "latency_ms".into(), new_type: FieldType::Int },
    }];
    assert!(DriftEnvironment::new(base_schema(), lossy, 4, 0).is_err());
    assert!(DriftEnvironment::new(base_schema(), vec![], 0, 0).is_err());
}

/// Smallest rank r with r / n >= 0.95, found by scanning.
fn scan_p95(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let r = (1..=n).find(|r| r * 100 >= 95 * n).unwrap();
    s[r - 1]
}

#[test]
fn p95_nearest_rank() {
    let xs: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(oracle_p95(&xs).unwrap(), scan_p95(&xs));
    assert_eq!(oracle_p95(&xs).unwrap(), 95.0);
    assert_eq!(oracle_p95(&[7.0]).unwrap(), 7.0);
    assert_eq!(oracle_p95(&[5.0; 4]).unwrap(), 5.0);
    assert_eq!(oracle_p95(&[]), Err(HarnessError::EmptyInput));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.gen_range(1..60);
        let xs: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(1..5000u32)) / 10.0).collect();
        assert_eq!(oracle_p95(&xs).unwrap(), scan_p95(&xs));
    }
}

#[test]
fn metrics_examples() {
    let m = compute_metrics(&[1.0, 0.88]).unwrap();
    assert_eq!(m.tgc, 0.5);
    assert!((m.apt - 0.94).abs() < 1e-12);
    let m = compute_metrics(&[1.0, 1.0, 1.0]).unwrap();
    assert_eq!((m.tgc, m.apt, m.n), (1.0, 1.0, 3));
    assert_eq!(compute_metrics(&[]), Err(HarnessError::EmptyScores));
    assert_eq!(compute_metrics(&[0.5, 1.5]), Err(HarnessError::ScoreOutOfRange(1.5)));
    assert!(compute_metrics(&[-0.1]).is_err());
}

#[test]
fn oracle_answers_pass_their_own_checks() {
    let env = three_drift_suite(2);
    for seed in 0..5 {
        for t in 0..40 {
            let g = generate_episode(&env, t, seed);
            assert_eq!(g.grade(Some(&g.oracle_answer)), (g.checks.len() as u32, g.checks.len() as u32));
            assert_eq!(g.task.check_count as usize, g.checks.len());
        }
    }
}

#[test]
fn answers_off_by_more_than_tolerance_fail() {
    let g = generate_episode(&canonical_drift_suite(0), 0, 0);
    let mut wrong = g.oracle_answer.clone();
    let (k, v) = g.oracle_answer.as_object().unwrap().iter().next().unwrap();
    wrong[k] = json!(v.as_f64().unwrap() + 0.01);
    assert_eq!(g.grade(Some(&wrong)).0, g.checks.len() as u32 - 1);
    assert_eq!(g.grade(None).0, 0);
}

#[test]
fn error_counts_use_server_errors_only() {
    let e = |ep: &str, status| LogEntry { timestamp: String::new(), endpoint: ep.into(), status, latency_ms: 1.0 };
    let out = compute_answer(Metric::ErrorCount, &[e("/a", 500), e("/a", 404), e("/a", 503), e("/b", 200)]);
    assert_eq!(out["/a"], json!(2));
    assert_eq!(out["/b"], json!(0));
}

fn sandbox() -> Sandbox {
    Sandbox::with_defaults().unwrap()
}

#[test]
fn baselines_on_the_drift_suite() {
    let env = canonical_drift_suite(7);
    let sb = sandbox();
    let budget = EvolveBudget::default();
    let none = run_baseline(BaselineKind::NoEvolution, &env, 30, 7, &budget, &sb).unwrap();
    assert_eq!(compute_metrics(&none.report.scores()[..10]).unwrap().tgc, 1.0);
    assert_eq!(none.metrics_from(10).unwrap().tgc, 0.0);
    assert_eq!(none.report.committed, 0);

    let memory = run_baseline(BaselineKind::AppendMemory, &env, 30, 7, &budget, &sb).unwrap();
    assert_eq!(memory.metrics_from(10).unwrap().tgc, 0.0);

    let agentic = run_baseline(BaselineKind::Agentic, &env, 30, 7, &budget, &sb).unwrap();
    assert_eq!(agentic.report.committed, 1);
    assert_eq!(agentic.report.evolution_steps, 3);
    assert_eq!(agentic.metrics_from(20).unwrap().tgc, 1.0);
    let commit_step = agentic.report.steps.iter().find(|s| s.c == 1).unwrap();
    assert_eq!(commit_step.episode, 19);
    assert_eq!(commit_step.objective.as_deref(), Some("schema drift: latency_ms renamed"));

    let again = run_baseline(BaselineKind::Agentic, &env, 30, 7, &budget, &sb).unwrap();
    assert_eq!(agentic, again);
}

#[test]
fn task_streams_match_across_kinds() {
    let env = canonical_drift_suite(3);
    let sb = sandbox();
    let runs: Vec<_> = BaselineKind::ALL
        .iter()
        .map(|k| {
            let cfg = {
                let mut c = crate::runner::RunConfig::new(env.clone(), 12, 3);
                c.evolver = match k {
                    BaselineKind::NoEvolution => crate::runner::EvolverSpec::None,
                    BaselineKind::AppendMemory => crate::runner::EvolverSpec::AppendMemory,
                    BaselineKind::Agentic => crate::runner::EvolverSpec::default(),
                };
                c
            };
            let rt = crate::runner::Runtime::in_memory(cfg.clock.build());
            let backend = cfg.evolver.build();
            let source = crate::runner::TaskSource::Drift { env: env.clone(), seed: 3 };
            crate::runner::run_episodes(&rt, &sb, &cfg, &source, &crate::governance::AutoReject, backend.as_deref()).unwrap();
            rt.evidence.all().iter().map(|t| serde_json::to_vec(&t.task).unwrap()).collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}
