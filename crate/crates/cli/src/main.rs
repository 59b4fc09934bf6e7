use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evolve_core::evolver::{run_evolution_step, CandidateUpdate, EvolveError, StepEnv};
use evolve_core::governance::{
    rollback, settle_review, verify_audit_chain, AuditLog, AuditRecordKind, AutoReject, GateMode, GovernanceError,
    Reviewer, ReviewerResponse, ReviewTicket, TicketStatus, Verdict, VerificationReport,
};
use evolve_core::harness::{
    compute_metrics, run_baseline, run_scaling_experiment, write_frontier_csv, write_summary_json, BaselineKind,
    HarnessError, ScalingConfig,
};
use evolve_core::registry::RegistryError;
use evolve_core::runner::{
    init_workspace, outcome_table, run_loop, RunConfig, RunError, Runtime, WorkspaceLock, CONFIG_FILE,
};
use evolve_core::sandbox::Sandbox;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "evolve", version, about = "Run and govern an evolving agent workspace")]
struct Cli {
    /// Workspace directory (defaults to the current directory).
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a workspace with a default config and seeded state.
    Init,
    /// Run the solve-evolve loop described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        gate: Option<Gate>,
        #[arg(long)]
        seed: Option<u64>,
        /// Leave human-gate tickets pending for `review` instead of asking.
        #[arg(long)]
        defer_reviews: bool,
    },
    /// Run one evolution step over the last W recorded episodes.
    Evolve {
        #[arg(long)]
        window: usize,
        /// Print the candidate and its report without committing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Inspect and settle review tickets.
    Review {
        #[command(subcommand)]
        action: ReviewAction,
    },
    Audit {
        #[command(subcommand)]
        action: AuditAction,
    },
    Snapshot {
        #[command(subcommand)]
        action: SnapshotAction,
    },
    /// Restore a recorded snapshot.
    Rollback {
        #[arg(long)]
        to: String,
    },
    Metrics {
        #[command(subcommand)]
        action: MetricsAction,
    },
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ReviewAction {
    List,
    Approve {
        ticket: String,
        #[arg(long)]
        note: String,
    },
    Reject {
        ticket: String,
        #[arg(long)]
        note: String,
    },
}

#[derive(Subcommand)]
enum AuditAction {
    Show {
        #[arg(long, default_value_t = 0)]
        from: u64,
    },
    Verify,
}

#[derive(Subcommand)]
enum SnapshotAction {
    List,
}

#[derive(Subcommand)]
enum MetricsAction {
    Report,
}

#[derive(Subcommand)]
enum ExperimentAction {
    Scaling {
        #[arg(long)]
        config: PathBuf,
        /// Output root; results land in <out>/<experiment name>/.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Auto,
    Human,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl fmt::Display) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }

    fn infra(msg: impl fmt::Display) -> Self {
        Self { code: 3, msg: msg.to_string() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self { code: e.exit_code() as u8, msg: e.to_string() }
    }
}

impl From<GovernanceError> for Failure {
    fn from(e: GovernanceError) -> Self {
        RunError::from(e).into()
    }
}

impl From<RegistryError> for Failure {
    fn from(e: RegistryError) -> Self {
        RunError::from(e).into()
    }
}

impl From<EvolveError> for Failure {
    fn from(e: EvolveError) -> Self {
        RunError::from(e).into()
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidSchedule(_) | HarnessError::EmptyInput => Failure::config(e),
            _ => Failure::infra(e),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Asks on the terminal; an empty answer or EOF defers.
struct PromptReviewer;

impl Reviewer for PromptReviewer {
    fn review(&self, ticket: &ReviewTicket, candidate: &CandidateUpdate, report: &VerificationReport) -> ReviewerResponse {
        let mut err = std::io::stderr();
        let _ = writeln!(err, "review {} for candidate {}", ticket.ticket_id, ticket.update_ref);
        for w in &candidate.writes {
            let _ = writeln!(err, "  {:?} {}", w.operator, w.id);
        }
        let _ = writeln!(err, "  verification: {}", if report.overall { "passed" } else { "failed" });
        let _ = write!(err, "approve, reject or defer? [a/r/D] ");
        let _ = err.flush();
        let mut line = String::new();
        if std::io::stdin().lock().read_line(&mut line).is_err() {
            return ReviewerResponse::Defer;
        }
        match line.trim() {
            "a" | "approve" => ReviewerResponse::Approve("approved at prompt".into()),
            "r" | "reject" => ReviewerResponse::Reject("rejected at prompt".into()),
            _ => ReviewerResponse::Defer,
        }
    }
}

struct Defer;

impl Reviewer for Defer {
    fn review(&self, _: &ReviewTicket, _: &CandidateUpdate, _: &VerificationReport) -> ReviewerResponse {
        ReviewerResponse::Defer
    }
}

/// Interactive when stdin is a terminal; otherwise human-gate tickets are
/// auto-rejected after being recorded.
fn reviewer(defer: bool) -> Box<dyn Reviewer> {
    if defer {
        Box::new(Defer)
    } else if std::io::stdin().is_terminal() {
        Box::new(PromptReviewer)
    } else {
        Box::new(AutoReject)
    }
}

fn workspace(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn load_workspace_config(ws: &Path) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&ws.join(CONFIG_FILE))?;
    cfg.workspace = ws.to_path_buf();
    Ok(cfg)
}

fn open(ws: &Path) -> Result<(RunConfig, Runtime), Failure> {
    let cfg = load_workspace_config(ws)?;
    let rt = Runtime::open(ws, cfg.clock.build())?;
    Ok((cfg, rt))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn cmd_init(ws: Option<PathBuf>) -> CliResult {
    let ws = ws.ok_or_else(|| Failure::config("init needs --workspace <dir>"))?;
    init_workspace(&ws)?;
    println!("initialized workspace {}", ws.display());
    Ok(())
}

fn cmd_run(ws: Option<PathBuf>, config: &Path, gate: Option<Gate>, seed: Option<u64>, defer: bool) -> CliResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(ws) = ws {
        cfg.workspace = ws;
    } else if cfg.workspace.as_os_str().is_empty() {
        cfg.workspace = config.parent().map(Path::to_path_buf).unwrap_or_default();
    }
    if let Some(g) = gate {
        cfg.gate_mode = match g {
            Gate::Auto => GateMode::Auto,
            Gate::Human => GateMode::Human,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_loop(&cfg, reviewer(defer).as_ref())?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_evolve(ws: &Path, window: usize, dry_run: bool) -> CliResult {
    if window < 1 {
        return Err(Failure::config("--window must be at least 1"));
    }
    let _lock = WorkspaceLock::acquire(ws)?;
    let (cfg, rt) = open(ws)?;
    let backend = cfg.evolver.build().ok_or_else(|| Failure::config("the configured evolver cannot run a gated step"))?;
    let last = rt.evidence.len().checked_sub(1).ok_or_else(|| Failure::config("no episodes recorded yet"))?;
    let sandbox = Sandbox::new(cfg.sandbox.clone()).map_err(Failure::infra)?;
    let reviewer = reviewer(false);
    let env = StepEnv {
        registry: &rt.registry,
        audit: &rt.audit,
        sandbox: &sandbox,
        reviews: &rt.reviews,
        reviewer: reviewer.as_ref(),
        gate_mode: cfg.gate_mode,
        episode: last,
        dry_run,
    };
    let out = run_evolution_step(&env, &rt.evidence, last, window, &cfg.budgets.evolve, backend.as_ref())?;
    if dry_run {
        println!("{}", pretty(&serde_json::json!({"candidate": out.candidate, "report": out.report})));
        return Ok(());
    }
    match (&out.diagnosis, &out.ticket) {
        (Some(d), _) if d.is_empty() => println!("nothing to change"),
        (_, Some(t)) if t.status == TicketStatus::Pending => println!("waiting on {}", t.ticket_id),
        _ => println!("c = {}, attempts {}, snapshot {}", out.c(), out.synthesis_attempts, out.snapshot_after),
    }
    if let Some(note) = &out.note {
        println!("note: {note}");
    }
    Ok(())
}

fn cmd_review(ws: &Path, action: ReviewAction) -> CliResult {
    let (_, rt) = open(ws)?;
    let (ticket, verdict, note) = match action {
        ReviewAction::List => {
            for item in rt.reviews.list() {
                let t = &item.ticket;
                println!("{}  {:?}  episode {}  candidate {}", t.ticket_id, t.status, item.episode, t.update_ref);
            }
            return Ok(());
        }
        ReviewAction::Approve { ticket, note } => (ticket, Verdict::Approved, note),
        ReviewAction::Reject { ticket, note } => (ticket, Verdict::Rejected, note),
    };
    let (t, decision, snap) = settle_review(&rt.reviews, &ticket, verdict, &note, &rt.registry, &rt.audit)?;
    println!("{} {:?}: c = {}, snapshot {}", t.ticket_id, t.status, decision.c, snap.snapshot_id);
    Ok(())
}

fn audit_bytes(ws: &Path) -> Result<Vec<u8>, Failure> {
    let path = ws.join("audit").join("audit.jsonl");
    match std::fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(vec![]),
        Err(e) => Err(Failure::infra(format!("{}: {e}", path.display()))),
    }
}

fn cmd_audit(ws: &Path, action: AuditAction) -> CliResult {
    if !ws.join(CONFIG_FILE).exists() {
        return Err(Failure::config(format!("{} is not an initialized workspace", ws.display())));
    }
    let bytes = audit_bytes(ws)?;
    match action {
        AuditAction::Verify => {
            if verify_audit_chain(&bytes) {
                println!("audit chain ok ({} records)", bytes.iter().filter(|&&b| b == b'\n').count());
                Ok(())
            } else {
                Err(Failure::infra("audit chain verification failed"))
            }
        }
        AuditAction::Show { from } => {
            let text = String::from_utf8_lossy(&bytes);
            for line in text.lines() {
                let rec: Value = serde_json::from_str(line).map_err(|e| Failure::infra(format!("unreadable audit line: {e}")))?;
                if rec["offset"].as_u64().is_some_and(|o| o >= from) {
                    println!("{line}");
                }
            }
            Ok(())
        }
    }
}

fn cmd_snapshots(ws: &Path) -> CliResult {
    let (_, rt) = open(ws)?;
    let current = rt.registry.current_snapshot_id();
    for s in rt.registry.list_snapshots() {
        let mark = if s.snapshot_id == current { "*" } else { " " };
        println!("{mark} {}  episode {}  {}  {} artifacts", s.snapshot_id, s.episode_index, s.created_at, s.heads.len());
    }
    Ok(())
}

fn cmd_rollback(ws: &Path, to: &str) -> CliResult {
    let _lock = WorkspaceLock::acquire(ws)?;
    let (_, rt) = open(ws)?;
    let restored = rollback(&rt.registry, &rt.audit, to, rt.evidence.len(), "operator rollback")?;
    println!("restored {}", restored.snapshot_id);
    Ok(())
}

/// Counts proposals, commits and proposals whose last verification failed.
fn audit_outcomes(audit: &AuditLog) -> (u64, u64, u64) {
    let mut proposals = 0;
    let mut failures = 0;
    let mut last: Option<bool> = None;
    let mut close = |last: &mut Option<bool>| {
        if *last == Some(false) {
            failures += 1;
        }
        *last = None;
    };
    for r in audit.records() {
        match r.record_kind {
            AuditRecordKind::Proposal => {
                close(&mut last);
                proposals += 1;
            }
            AuditRecordKind::Verification => last = r.payload["report"]["overall"].as_bool(),
            _ => {}
        }
    }
    close(&mut last);
    (proposals, audit.count(AuditRecordKind::Commit), failures)
}

fn cmd_metrics(ws: &Path) -> CliResult {
    let (_, rt) = open(ws)?;
    let scores: Vec<f64> = rt.evidence.all().iter().map(|t| t.score).collect();
    if scores.is_empty() {
        println!("no episodes recorded");
    } else {
        let m = compute_metrics(&scores)?;
        println!("episodes           {}\nTGC                {:.4}\nAPT                {:.4}", m.n, m.tgc, m.apt);
    }
    println!("rejected           {}", rt.audit.count(AuditRecordKind::Rejection));
    println!("rollbacks          {}\n", rt.audit.count(AuditRecordKind::Rollback));
    let (p, c, f) = audit_outcomes(&rt.audit);
    print!("{}", outcome_table(p, c, f));
    Ok(())
}

fn cmd_scaling(config: &Path, out: &Path) -> CliResult {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
    let cfg: ScalingConfig = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
    cfg.env.validate()?;
    let sandbox = Sandbox::with_defaults().map_err(Failure::infra)?;
    let result = run_scaling_experiment(&cfg, &sandbox)?;
    let dir = out.join(&cfg.name);
    write_frontier_csv(&dir.join("frontier.csv"), &result.points)?;
    let episodes = u64::from(*cfg.step_counts.iter().max().expect("checked non-empty")) * cfg.batch;
    let mut baselines = BTreeMap::new();
    for kind in BaselineKind::ALL {
        let budget = Default::default();
        baselines.insert(kind, run_baseline(kind, &cfg.env, episodes, cfg.seed, &budget, &sandbox)?.summary);
    }
    write_summary_json(&dir.join("summary.json"), &baselines, &result.evaluation)?;
    println!("budget  steps  TGC     APT");
    for p in &result.points {
        println!("{:>6}  {:>5}  {:.4}  {:.4}", p.budget_value, p.steps_used, p.tgc, p.apt);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    let ws = workspace(&cli.workspace);
    match cli.command {
        Command::Init => cmd_init(cli.workspace),
        Command::Run { config, gate, seed, defer_reviews } => cmd_run(cli.workspace, &config, gate, seed, defer_reviews),
        Command::Evolve { window, dry_run } => cmd_evolve(&ws, window, dry_run),
        Command::Review { action } => cmd_review(&ws, action),
        Command::Audit { action } => cmd_audit(&ws, action),
        Command::Snapshot { action: SnapshotAction::List } => cmd_snapshots(&ws),
        Command::Rollback { to } => cmd_rollback(&ws, &to),
        Command::Metrics { action: MetricsAction::Report } => cmd_metrics(&ws),
        Command::Experiment { action: ExperimentAction::Scaling { config, out } } => cmd_scaling(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
