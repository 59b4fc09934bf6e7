//! Baselines and the evolution-scaling sweep over drift suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    base_schema, compute_metrics, generate_with_schema, DriftEnvironment, FieldType, HarnessError, MetricsSummary,
    Mutation, ScheduledMutation, HELD_OUT_TASKS,
};
use crate::clock::ClockKind;
use crate::evolver::{DefectSchedule, EvolveBudget};
use crate::governance::AutoReject;
use crate::runner::{run_episodes, EvolverSpec, RunConfig, RunReport, Runtime, TaskSource};
use crate::sandbox::Sandbox;
use crate::solve::run_solve;

/// Episodes are indexed from here for held-out tasks, far from any run.
const HELD_OUT_OFFSET: u64 = 1_000_000;

/// One rename of `latency_ms` at episode 10, ten records per task.
pub fn canonical_drift_suite(seed: u64) -> DriftEnvironment {
    DriftEnvironment::new(
        base_schema(),
        vec![ScheduledMutation {
            episode: 10,
            mutation: Mutation::Rename { field: "latency_ms".into(), new_name: "latency_millis".into() },
        }],
        10,
        seed,
    )
    .expect("suite is valid")
}

/// Three independent drifts at episodes 5, 15 and 25.
pub fn three_drift_suite(seed: u64) -> DriftEnvironment {
    DriftEnvironment::new(
        base_schema(),
        vec![
            ScheduledMutation {
                episode: 5,
                mutation: Mutation::Rename { field: "latency_ms".into(), new_name: "latency_millis".into() },
            },
            ScheduledMutation {
                episode: 15,
                mutation: Mutation::Nest { field: "status".into(), new_parent: "http".into() },
            },
            ScheduledMutation {
                episode: 25,
                mutation: Mutation::TypeChange { field: "latency_millis".into(), new_type: FieldType::String },
            },
        ],
        10,
        seed,
    )
    .expect("suite is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    NoEvolution,
    AppendMemory,
    Agentic,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::NoEvolution, BaselineKind::AppendMemory, BaselineKind::Agentic];

    fn evolver(self, defects: &DefectSchedule) -> EvolverSpec {
        match self {
            BaselineKind::NoEvolution => EvolverSpec::None,
            BaselineKind::AppendMemory => EvolverSpec::AppendMemory,
            BaselineKind::Agentic => EvolverSpec::Scripted { defects: defects.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub summary: MetricsSummary,
    pub report: RunReport,
}

impl BaselineRun {
    /// Metrics over episodes `from..` of the run.
    pub fn metrics_from(&self, from: u64) -> Result<MetricsSummary, HarnessError> {
        compute_metrics(self.report.scores().get(from as usize..).unwrap_or(&[]))
    }
}

fn loop_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Loop(e.to_string())
}

fn run_config(env: &DriftEnvironment, episodes: u64, seed: u64, evolver: EvolverSpec, budget: &EvolveBudget) -> RunConfig {
    let mut cfg = RunConfig::new(env.clone(), episodes, seed);
    cfg.evolver = evolver;
    cfg.budgets.evolve = *budget;
    cfg.clock = ClockKind::Logical;
    cfg
}

/// Runs one baseline in memory. Task streams depend only on `(env, seed)`.
pub fn run_baseline(
    kind: BaselineKind,
    env: &DriftEnvironment,
    episodes: u64,
    seed: u64,
    budget: &EvolveBudget,
    sandbox: &Sandbox,
) -> Result<BaselineRun, HarnessError> {
    if episodes < 1 {
        return Err(HarnessError::EmptyInput);
    }
    let cfg = run_config(env, episodes, seed, kind.evolver(&DefectSchedule::None), budget);
    let rt = Runtime::in_memory(cfg.clock.build());
    let backend = cfg.evolver.build();
    let source = TaskSource::Drift { env: env.clone(), seed };
    let report = run_episodes(&rt, sandbox, &cfg, &source, &AutoReject, backend.as_deref()).map_err(loop_err)?;
    let summary = report.metrics.clone().ok_or(HarnessError::EmptyScores)?;
    Ok(BaselineRun { kind, summary, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub step_counts: Vec<u32>,
    #[serde(default = "default_batch")]
    pub batch: u64,
    /// Values of `max_repair_attempts` to sweep.
    pub budgets: Vec<u32>,
    #[serde(default)]
    pub defects: DefectSchedule,
    pub env: DriftEnvironment,
    pub seed: u64,
    #[serde(default = "default_held_out")]
    pub held_out: usize,
}

fn default_name() -> String {
    "scaling".into()
}

fn default_batch() -> u64 {
    10
}

fn default_held_out() -> usize {
    HELD_OUT_TASKS
}

impl ScalingConfig {
    /// The 3-drift suite with defect counts 0, 1 and 3 for the three
    /// synthesis sessions, swept over repair budgets {0, 1, 3} and
    /// {1, 2, 3} steps.
    pub fn three_drift(seed: u64) -> Self {
        Self {
            name: default_name(),
            step_counts: vec![1, 2, 3],
            batch: default_batch(),
            budgets: vec![0, 1, 3],
            defects: DefectSchedule::PerStep { counts: vec![0, 1, 3] },
            env: three_drift_suite(seed),
            seed,
            held_out: HELD_OUT_TASKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub budget_label: String,
    pub budget_value: u32,
    pub steps_used: u32,
    #[serde(rename = "TGC")]
    pub tgc: f64,
    #[serde(rename = "APT")]
    pub apt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub points: Vec<FrontierPoint>,
    /// What the held-out set is drawn from.
    pub evaluation: String,
}

/// Scores the current state on `n` tasks from the final post-drift schema.
pub fn evaluate_held_out(
    rt: &Runtime,
    sandbox: &Sandbox,
    cfg: &RunConfig,
    env: &DriftEnvironment,
    n: usize,
    seed: u64,
) -> Result<MetricsSummary, HarnessError> {
    let schema = env.schema_at(env.final_episode());
    let policy = cfg.solver.build().map_err(loop_err)?;
    let view = rt.registry.current_view();
    let scores = (0..n as u64)
        .map(|i| {
            let g = generate_with_schema(&schema, env.records_per_task, HELD_OUT_OFFSET + i, seed);
            let mut traj = run_solve(policy.as_ref(), &view, sandbox, &g.task, &cfg.budgets.solve).map_err(loop_err)?;
            g.score(&mut traj);
            Ok(traj.score)
        })
        .collect::<Result<Vec<f64>, HarnessError>>()?;
    compute_metrics(&scores)
}

fn scaling_point(config: &ScalingConfig, budget: u32, k: u32, sandbox: &Sandbox) -> Result<FrontierPoint, HarnessError> {
    let evolve = EvolveBudget { max_repair_attempts: budget, ..EvolveBudget::default() };
    let evolver = if k == 0 { EvolverSpec::None } else { EvolverSpec::Scripted { defects: config.defects.clone() } };
    let mut cfg = run_config(&config.env, u64::from(k) * config.batch, config.seed, evolver, &evolve);
    cfg.batch_size = config.batch;
    let rt = Runtime::in_memory(cfg.clock.build());
    let backend = cfg.evolver.build();
    let source = TaskSource::Drift { env: config.env.clone(), seed: config.seed };
    let report = run_episodes(&rt, sandbox, &cfg, &source, &AutoReject, backend.as_deref()).map_err(loop_err)?;
    let m = evaluate_held_out(&rt, sandbox, &cfg, &config.env, config.held_out, config.seed)?;
    Ok(FrontierPoint {
        budget_label: "max_repair_attempts".into(),
        budget_value: budget,
        steps_used: report.evolution_steps as u32,
        tgc: m.tgc,
        apt: m.apt,
    })
}

/// For each repair budget and step count `k`, runs `k` batches each followed
/// by one evolution step, then evaluates on the held-out set. Points are
/// ordered by budget, then `k`.
pub fn run_scaling_experiment(config: &ScalingConfig, sandbox: &Sandbox) -> Result<ScalingResult, HarnessError> {
    if config.step_counts.is_empty() || config.budgets.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    if config.batch < 1 || config.held_out < 1 {
        return Err(HarnessError::Loop("batch and held_out must be positive".into()));
    }
    let grid: Vec<(u32, u32)> =
        config.budgets.iter().flat_map(|&b| config.step_counts.iter().map(move |&k| (b, k))).collect();
    // Grid points are independent runs.
    let points = std::thread::scope(|s| {
        let handles: Vec<_> = grid.iter().map(|&(b, k)| s.spawn(move || scaling_point(config, b, k, sandbox))).collect();
        handles.into_iter().map(|h| h.join().expect("scaling worker panicked")).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(ScalingResult {
        points,
        evaluation: format!(
            "{} held-out tasks drawn from the schema in force after the last scheduled drift (episode {})",
            config.held_out,
            config.env.final_episode()
        ),
    })
}

pub fn write_frontier_csv(path: &Path, points: &[FrontierPoint]) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Loop(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Loop(e.to_string()))?;
    w.write_record(["budget_label", "budget_value", "steps_used", "TGC", "APT"])
        .map_err(|e| HarnessError::Loop(e.to_string()))?;
    for p in points {
        w.write_record([
            p.budget_label.clone(),
            p.budget_value.to_string(),
            p.steps_used.to_string(),
            format!("{:.6}", p.tgc),
            format!("{:.6}", p.apt),
        ])
        .map_err(|e| HarnessError::Loop(e.to_string()))?;
    }
    w.flush().map_err(io)
}

/// Writes one `MetricsSummary` per baseline kind plus a note on the
/// evaluation protocol.
pub fn write_summary_json(
    path: &Path,
    baselines: &BTreeMap<BaselineKind, MetricsSummary>,
    evaluation: &str,
) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Loop(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let doc = json!({"baselines": baselines, "evaluation": evaluation});
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    text.push('\n');
    fs::write(path, text).map_err(io)
}
