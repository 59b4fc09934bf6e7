//! Workspaces and the solve-evolve run loop.
//!
//! Workspace layout:
//!
//! ```text
//! <dir>/config.json
//! <dir>/registry/...            artifact histories and index
//! <dir>/snapshots/<id>.json
//! <dir>/evidence/trajectories.jsonl
//! <dir>/audit/audit.jsonl
//! <dir>/reviews/review_NNNN.json
//! <dir>/results/
//! <dir>/run.lock                present while a run loop owns the workspace
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::canonical;
use crate::clock::{Clock, ClockKind};
use crate::evidence::{EvidenceError, EvidenceLog};
use crate::evolver::schema::{FieldTable, SCHEMA_DOC};
use crate::evolver::{
    run_evolution_step, DefectSchedule, EvolveBudget, EvolveError, EvolverBackend, RemoteEvolver,
    RemoteEvolverParams, ScriptedEvolver, StepEnv, StepOutcome,
};
use crate::governance::{AuditLog, AuditRecordKind, GateMode, GovernanceError, ReviewQueue, Reviewer};
use crate::harness::{compute_metrics, generate_episode, DriftEnvironment, GeneratedTask, MetricsSummary};
use crate::registry::{ArtifactId, KnowledgeDoc, Payload, Registry, RegistryError};
use crate::remote::{EndpointConfig, HttpTransport};
use crate::sandbox::{Sandbox, SandboxConfig, SandboxError};
use crate::solve::{run_solve, tokens_of, PolicyHandle, SolveBudget, SolveError};

pub const CONFIG_FILE: &str = "config.json";
pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("workspace {0} is locked by another run")]
    WorkspaceLocked(PathBuf),
    #[error("infrastructure failure: {0}")]
    Infrastructure(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Governance(#[from] GovernanceError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

impl From<SolveError> for RunError {
    fn from(e: SolveError) -> Self {
        RunError::Infrastructure(e.to_string())
    }
}

impl From<SandboxError> for RunError {
    fn from(e: SandboxError) -> Self {
        RunError::Infrastructure(e.to_string())
    }
}

impl RunError {
    /// 2 configuration, 3 gate or verification infrastructure, 4 lock.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::WorkspaceLocked(_) => 4,
            RunError::Registry(RegistryError::UnknownSnapshot(_))
            | RunError::Governance(
                GovernanceError::UnknownSnapshot(_)
                | GovernanceError::StaleCandidate { .. }
                | GovernanceError::UnknownTicket(_)
                | GovernanceError::AlreadyResolved(_),
            ) => 2,
            _ => 3,
        }
    }
}

/// Which update rule runs at each batch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EvolverSpec {
    /// Never writes the artifact state.
    None,
    /// Appends every failed trajectory as a knowledge document, ungated.
    AppendMemory,
    Scripted {
        #[serde(default)]
        defects: DefectSchedule,
    },
    Remote {
        endpoint_config: EndpointConfig,
        #[serde(default)]
        params: RemoteEvolverParams,
    },
}

impl Default for EvolverSpec {
    fn default() -> Self {
        EvolverSpec::Scripted { defects: DefectSchedule::None }
    }
}

impl EvolverSpec {
    pub fn build(&self) -> Option<Box<dyn EvolverBackend>> {
        match self {
            EvolverSpec::None | EvolverSpec::AppendMemory => None,
            EvolverSpec::Scripted { defects } => Some(Box::new(ScriptedEvolver::new(defects.clone()))),
            EvolverSpec::Remote { endpoint_config, params } => {
                Some(Box::new(RemoteEvolver::new(Arc::new(HttpTransport::new(endpoint_config)), *params)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    #[serde(default)]
    pub solve: SolveBudget,
    #[serde(default)]
    pub evolve: EvolveBudget,
}

fn default_batch() -> u64 {
    10
}

fn default_window() -> usize {
    crate::evidence::DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub env: Option<DriftEnvironment>,
    /// JSON array of generated tasks, used instead of `env`.
    #[serde(default)]
    pub task_file: Option<PathBuf>,
    pub episode_count: u64,
    #[serde(default = "default_batch")]
    pub batch_size: u64,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub solver: PolicyHandle,
    #[serde(default)]
    pub evolver: EvolverSpec,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workspace: PathBuf,
    /// Evidence window handed to each evolution step.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default)]
    pub sandbox: SandboxConfig,
}

impl RunConfig {
    pub fn new(env: DriftEnvironment, episode_count: u64, seed: u64) -> Self {
        Self {
            env: Some(env),
            task_file: None,
            episode_count,
            batch_size: default_batch(),
            gate_mode: GateMode::Auto,
            solver: PolicyHandle::default(),
            evolver: EvolverSpec::default(),
            budgets: Budgets::default(),
            seed,
            workspace: PathBuf::new(),
            window: default_window(),
            clock: ClockKind::Logical,
            sandbox: SandboxConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.into()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        match (&self.env, &self.task_file) {
            (Some(env), None) => env.validate().map_err(|e| RunError::Config(e.to_string())),
            (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => bad("give either env or task_file, not both"),
            (None, None) => bad("one of env or task_file is required"),
        }
    }
}

/// Where episode tasks come from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    Drift { env: DriftEnvironment, seed: u64 },
    Fixed(Vec<GeneratedTask>),
}

impl TaskSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, RunError> {
        if let Some(env) = &cfg.env {
            return Ok(TaskSource::Drift { env: env.clone(), seed: cfg.seed });
        }
        let path = cfg.task_file.as_ref().ok_or_else(|| RunError::Config("no task source".into()))?;
        let path = if path.is_relative() && !cfg.workspace.as_os_str().is_empty() && !path.exists() {
            cfg.workspace.join(path)
        } else {
            path.clone()
        };
        let text = fs::read_to_string(&path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let tasks: Vec<GeneratedTask> =
            serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        if tasks.is_empty() {
            return Err(RunError::Config(format!("{} holds no tasks", path.display())));
        }
        Ok(TaskSource::Fixed(tasks))
    }

    /// Task for episode `t`. Fixed task lists repeat.
    pub fn task(&self, t: u64) -> GeneratedTask {
        match self {
            TaskSource::Drift { env, seed } => generate_episode(env, t, *seed),
            TaskSource::Fixed(tasks) => {
                let mut g = tasks[(t % tasks.len() as u64) as usize].clone();
                g.task.episode = t;
                g
            }
        }
    }
}

/// Stores for one workspace (or in memory).
pub struct Runtime {
    pub registry: Registry,
    pub audit: AuditLog,
    pub evidence: EvidenceLog,
    pub reviews: ReviewQueue,
    pub clock: Arc<dyn Clock>,
}

impl Runtime {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            registry: Registry::in_memory(clock.clone()),
            audit: AuditLog::in_memory(clock.clone()),
            evidence: EvidenceLog::in_memory(),
            reviews: ReviewQueue::in_memory(),
            clock,
        }
    }

    pub fn open(workspace: &Path, clock: Arc<dyn Clock>) -> Result<Self, RunError> {
        if !workspace.join(CONFIG_FILE).exists() {
            return Err(RunError::Config(format!("{} is not an initialized workspace", workspace.display())));
        }
        Ok(Self {
            registry: Registry::open(workspace, clock.clone())?,
            audit: AuditLog::open(workspace, clock.clone())?,
            evidence: EvidenceLog::open(workspace)?,
            reviews: ReviewQueue::open(workspace)?,
            clock,
        })
    }
}

/// Seeds an empty registry with the schema document describing the
/// original record layout.
pub fn seed_state(registry: &Registry) -> Result<(), RunError> {
    if registry.ids().is_empty() {
        registry.put_artifact(ArtifactId::knowledge(SCHEMA_DOC), Payload::Knowledge(FieldTable::default().to_doc()), None, 0)?;
    }
    Ok(())
}

/// Creates the workspace layout with a default config and the seeded state.
pub fn init_workspace(dir: &Path) -> Result<RunConfig, RunError> {
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() {
        return Err(RunError::Config(format!("{} is already initialized", dir.display())));
    }
    let io = |e: std::io::Error| RunError::Infrastructure(format!("{}: {e}", dir.display()));
    for sub in ["registry", "evidence", "audit", "reviews", "results"] {
        fs::create_dir_all(dir.join(sub)).map_err(io)?;
    }
    let mut cfg = RunConfig::new(crate::harness::canonical_drift_suite(0), 30, 0);
    cfg.workspace = dir.to_path_buf();
    let clock = cfg.clock.build();
    seed_state(&Registry::open(dir, clock)?)?;
    let mut text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    text.push('\n');
    fs::write(&config_path, text).map_err(io)?;
    Ok(cfg)
}

/// Exclusive ownership of a workspace; released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(workspace: &Path) -> Result<Self, RunError> {
        let path = workspace.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::WorkspaceLocked(workspace.to_path_buf())),
            Err(e) => Err(RunError::Infrastructure(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One evolution step as seen by the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub episode: u64,
    pub objective: Option<String>,
    pub proposed: bool,
    pub c: u8,
    pub synthesis_attempts: u32,
    pub repairs_used: u32,
    pub verified: Option<bool>,
    pub ticket: Option<String>,
    pub snapshot_before: String,
    pub snapshot_after: String,
    pub note: Option<String>,
}

impl StepSummary {
    fn from_outcome(episode: u64, out: &StepOutcome) -> Self {
        Self {
            episode,
            objective: out.diagnosis.as_ref().filter(|d| !d.is_empty()).map(|d| d.objective.clone()),
            proposed: out.diagnosis.as_ref().is_some_and(|d| !d.is_empty()),
            c: out.c(),
            synthesis_attempts: out.synthesis_attempts,
            repairs_used: out.repairs_used,
            verified: out.report.as_ref().map(|r| r.overall),
            ticket: out.ticket.as_ref().map(|t| t.ticket_id.clone()),
            snapshot_before: out.snapshot_before.clone(),
            snapshot_after: out.snapshot_after.clone(),
            note: out.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub episodes_run: u64,
    pub evolution_steps: u64,
    pub proposals: u64,
    pub committed: u64,
    pub rejected: u64,
    /// Proposals whose final verification report failed.
    pub verification_failures: u64,
    /// Proposals waiting on a review ticket.
    pub pending_review: u64,
    pub metrics: Option<MetricsSummary>,
    pub final_snapshot_id: String,
    pub audit_head_digest: String,
    pub steps: Vec<StepSummary>,
}

impl RunReport {
    /// Scores of the episodes run, in order.
    pub fn scores(&self) -> &[f64] {
        self.metrics.as_ref().map(|m| m.per_episode_scores.as_slice()).unwrap_or(&[])
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("episodes run       {}\n", self.episodes_run));
        out.push_str(&format!("evolution steps    {}\n", self.evolution_steps));
        if let Some(m) = &self.metrics {
            out.push_str(&format!("TGC                {:.4}\nAPT                {:.4}\n", m.tgc, m.apt));
        }
        out.push_str(&format!("rejected           {}\n", self.rejected));
        if self.pending_review > 0 {
            out.push_str(&format!("pending review     {}\n", self.pending_review));
        }
        out.push_str(&format!("final snapshot     {}\n", self.final_snapshot_id));
        out.push_str(&format!("audit head         {}\n\n", self.audit_head_digest));
        out.push_str(&outcome_table(self.proposals, self.committed, self.verification_failures));
        out
    }
}

/// The verification-outcomes table.
pub fn outcome_table(proposals: u64, committed: u64, failures: u64) -> String {
    let head = ["Proposals", "Committed", "Verification Failures"];
    let row = [proposals.to_string(), committed.to_string(), failures.to_string()];
    let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: Vec<String>| format!("| {} |\n", cells.join(" | "));
    let mut out = line(head.iter().zip(&widths).map(|(h, w)| format!("{h:<w$}")).collect());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect()));
    out.push_str(&line(row.iter().zip(&widths).map(|(r, w)| format!("{r:>w$}")).collect()));
    out
}

fn memory_doc(traj: &crate::evidence::Trajectory) -> KnowledgeDoc {
    let mut triggers: Vec<String> = tokens_of(&traj.task.description).into_iter().collect();
    triggers.sort();
    let body = traj
        .steps
        .iter()
        .map(|s| format!("{}: {}", canonical::canonical_string(&s.kind), s.text()))
        .collect::<Vec<_>>()
        .join("\n");
    KnowledgeDoc {
        doc_type: crate::registry::DocType::Exemplar,
        title: format!("Failed episode {}", traj.episode),
        body,
        triggers,
        frontmatter: Default::default(),
    }
}

/// Runs `cfg.episode_count` episodes against `rt`, with one evolution step
/// after every `cfg.batch_size` episodes when a backend is given.
pub fn run_episodes(
    rt: &Runtime,
    sandbox: &Sandbox,
    cfg: &RunConfig,
    source: &TaskSource,
    reviewer: &dyn Reviewer,
    backend: Option<&dyn EvolverBackend>,
) -> Result<RunReport, RunError> {
    if cfg.batch_size < 1 {
        return Err(RunError::Config("batch_size must be at least 1".into()));
    }
    seed_state(&rt.registry)?;
    let policy = cfg.solver.build().map_err(|e| RunError::Config(e.to_string()))?;
    let counts = |k| rt.audit.count(k);
    let before = (counts(AuditRecordKind::Proposal), counts(AuditRecordKind::Commit), counts(AuditRecordKind::Rejection));
    let start = rt.evidence.len();
    let mut scores = Vec::new();
    let mut steps = Vec::new();
    for i in 0..cfg.episode_count {
        let t = start + i;
        let generated = source.task(t);
        let view = rt.registry.current_view();
        let mut traj = run_solve(policy.as_ref(), &view, sandbox, &generated.task, &cfg.budgets.solve)?;
        generated.score(&mut traj);
        scores.push(traj.score);
        let memory = (cfg.evolver == EvolverSpec::AppendMemory && !traj.success).then(|| memory_doc(&traj));
        rt.evidence.record_trajectory(traj)?;
        if let Some(doc) = memory {
            rt.registry.put_artifact(ArtifactId::knowledge(format!("memory_{t:06}")), Payload::Knowledge(doc), None, t)?;
        }
        if (i + 1) % cfg.batch_size != 0 {
            continue;
        }
        let Some(backend) = backend else { continue };
        let env = StepEnv {
            registry: &rt.registry,
            audit: &rt.audit,
            sandbox,
            reviews: &rt.reviews,
            reviewer,
            gate_mode: cfg.gate_mode,
            episode: t,
            dry_run: false,
        };
        let snapshot = rt.registry.current_snapshot_id();
        match run_evolution_step(&env, &rt.evidence, t, cfg.window, &cfg.budgets.evolve, backend) {
            Ok(out) => steps.push(StepSummary::from_outcome(t, &out)),
            // Audited as a rejected step by the evolver; the run goes on.
            Err(EvolveError::BudgetExhausted(m)) => steps.push(StepSummary {
                episode: t,
                objective: None,
                proposed: true,
                c: 0,
                synthesis_attempts: 0,
                repairs_used: 0,
                verified: None,
                ticket: None,
                snapshot_before: snapshot.clone(),
                snapshot_after: snapshot,
                note: Some(format!("evolve budget exhausted: {m}")),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let proposals = counts(AuditRecordKind::Proposal) - before.0;
    let committed = counts(AuditRecordKind::Commit) - before.1;
    let rejected = counts(AuditRecordKind::Rejection) - before.2;
    Ok(RunReport {
        episodes_run: cfg.episode_count,
        evolution_steps: steps.len() as u64,
        proposals,
        committed,
        rejected,
        verification_failures: steps.iter().filter(|s| s.verified == Some(false)).count() as u64,
        pending_review: proposals.saturating_sub(committed + rejected),
        metrics: if scores.is_empty() { None } else { Some(compute_metrics(&scores).expect("scores lie in [0, 1]")) },
        final_snapshot_id: rt.registry.current_snapshot_id(),
        audit_head_digest: rt.audit.head_digest(),
        steps,
    })
}

/// Runs the configured loop on its workspace, holding the workspace lock for
/// the whole run. The report is also written to `results/run_report.json`.
pub fn run_loop(cfg: &RunConfig, reviewer: &dyn Reviewer) -> Result<RunReport, RunError> {
    cfg.validate()?;
    if cfg.workspace.as_os_str().is_empty() {
        return Err(RunError::Config("workspace is required".into()));
    }
    if !cfg.workspace.join(CONFIG_FILE).exists() {
        return Err(RunError::Config(format!("{} is not an initialized workspace", cfg.workspace.display())));
    }
    let _lock = WorkspaceLock::acquire(&cfg.workspace)?;
    let source = TaskSource::from_config(cfg)?;
    let sandbox = Sandbox::new(cfg.sandbox.clone())?;
    let rt = Runtime::open(&cfg.workspace, cfg.clock.build())?;
    let backend = cfg.evolver.build();
    let report = run_episodes(&rt, &sandbox, cfg, &source, reviewer, backend.as_deref())?;
    let results = cfg.workspace.join("results");
    fs::create_dir_all(&results).map_err(|e| RunError::Infrastructure(e.to_string()))?;
    let text = serde_json::to_string_pretty(&json!(report)).expect("report serializes");
    fs::write(results.join("run_report.json"), text + "\n").map_err(|e| RunError::Infrastructure(e.to_string()))?;
    Ok(report)
}
