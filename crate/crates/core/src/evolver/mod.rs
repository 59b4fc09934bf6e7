//! The evolve phase: diagnose, plan and synthesize a candidate update over a
//! pluggable backend, then hand it to the gate with a bounded repair loop.

mod remote;
pub mod schema;
mod scripted;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::evidence::{EvidenceError, EvidenceLog, FailureSignature, Trajectory};
use crate::governance::{
    self, AuditLog, AuditRecordKind, CommitDecision, GateMode, GovernanceError, ReviewQueue, ReviewTicket,
    Reviewer, ReviewerResponse, VerificationReport, Verdict,
};
use crate::registry::{ArtifactId, ArtifactKind, Payload, Registry, RegistryError, StateSnapshot, StateView, ValidationCase, WriteOp};
use crate::sandbox::Sandbox;

pub use remote::{RemoteEvolver, RemoteEvolverParams};
pub use scripted::{current_table, DefectSchedule, ScriptedEvolver, DEFAULT_PATTERNS, SIGNATURE_THRESHOLD};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("evolve budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid plan ({rule}): {detail}")]
    InvalidPlan { rule: &'static str, detail: String },
    #[error("evidence log is empty")]
    EmptyLog,
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Governance(#[from] GovernanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub end: u64,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub id: String,
    pub objective: String,
    pub signatures: Vec<FailureSignature>,
    pub implicated: Vec<ArtifactId>,
    pub confidence: f64,
    pub window_ref: WindowRef,
    /// Backend-specific structured notes backing the objective.
    #[serde(default)]
    pub findings: Vec<Value>,
}

impl Diagnosis {
    pub fn empty(window_ref: WindowRef) -> Self {
        Self::new(String::new(), vec![], vec![], 0.0, window_ref, vec![])
    }

    pub fn new(
        objective: String,
        signatures: Vec<FailureSignature>,
        implicated: Vec<ArtifactId>,
        confidence: f64,
        window_ref: WindowRef,
        findings: Vec<Value>,
    ) -> Self {
        let mut d = Self { id: String::new(), objective, signatures, implicated, confidence, window_ref, findings };
        d.id = canonical::digest_of(&d)[..16].to_string();
        d
    }

    /// Nothing actionable: the step is a no-op.
    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty() && self.objective.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOperator {
    Add,
    Patch,
    Refactor,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAction {
    pub operator: EditOperator,
    pub target_kind: ArtifactKind,
    pub target: String,
    #[serde(default)]
    pub spec: Value,
    #[serde(default)]
    pub depends_on: Vec<usize>,
    #[serde(default)]
    pub rationale: String,
}

impl EditAction {
    pub fn target_id(&self) -> ArtifactId {
        ArtifactId::new(self.target_kind, self.target.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub diagnosis_ref: String,
    pub actions: Vec<EditAction>,
    #[serde(default)]
    pub ordering_note: String,
}

impl EditPlan {
    pub fn digest(&self) -> String {
        canonical::digest_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWrite {
    pub action_index: usize,
    pub operator: EditOperator,
    pub id: ArtifactId,
    /// Absent for prune.
    #[serde(default)]
    pub payload: Option<Payload>,
    #[serde(default)]
    pub base_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachedCheck {
    pub id: ArtifactId,
    pub case: ValidationCase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub diagnosis_id: String,
    pub plan_digest: String,
    pub created_at: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateUpdate {
    pub plan_ref: String,
    pub writes: Vec<CandidateWrite>,
    pub attached_checks: Vec<AttachedCheck>,
    pub provenance: Provenance,
}

impl CandidateUpdate {
    pub fn digest(&self) -> String {
        canonical::digest_of(self)
    }

    /// Registry transaction for this candidate: the writes in plan order,
    /// followed by the attached checks.
    pub fn write_ops(&self) -> Vec<WriteOp> {
        let mut ops: Vec<WriteOp> = self
            .writes
            .iter()
            .map(|w| match (w.operator, &w.payload) {
                (EditOperator::Prune, _) => WriteOp::Prune { id: w.id.clone() },
                (EditOperator::Add, Some(p)) => WriteOp::Put { id: w.id.clone(), payload: p.clone() },
                (_, Some(p)) => WriteOp::Patch {
                    id: w.id.clone(),
                    base_version: w.base_version.unwrap_or(0),
                    payload: p.clone(),
                },
                // Rejected by the structural checks; staged as a patch with
                // nothing to write so the registry reports it.
                (_, None) => WriteOp::Prune { id: w.id.clone() },
            })
            .collect();
        ops.extend(self.attached_checks.iter().map(|c| WriteOp::Put {
            id: c.id.clone(),
            payload: Payload::Validation(c.case.clone()),
        }));
        ops
    }

    pub fn written_ids(&self) -> BTreeSet<ArtifactId> {
        self.writes.iter().map(|w| w.id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolveBudget {
    pub max_backend_calls: u32,
    pub max_sandbox_executions: u32,
    #[serde(default = "default_repairs")]
    pub max_repair_attempts: u32,
}

fn default_repairs() -> u32 {
    3
}

impl Default for EvolveBudget {
    fn default() -> Self {
        Self { max_backend_calls: 32, max_sandbox_executions: 256, max_repair_attempts: default_repairs() }
    }
}

/// Consumed evolve-time budget for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetMeter {
    pub backend_calls: u32,
    pub sandbox_executions: u32,
}

impl BudgetMeter {
    pub fn charge_call(&mut self, budget: &EvolveBudget, what: &str) -> Result<(), EvolveError> {
        if self.backend_calls >= budget.max_backend_calls {
            return Err(EvolveError::BudgetExhausted(format!(
                "{what} needs a backend call but all {} are used",
                budget.max_backend_calls
            )));
        }
        self.backend_calls += 1;
        Ok(())
    }

    pub fn charge_sandbox(&mut self, budget: &EvolveBudget, n: u32) -> Result<(), EvolveError> {
        if self.sandbox_executions + n > budget.max_sandbox_executions {
            return Err(EvolveError::BudgetExhausted(format!(
                "verification needs {n} sandbox executions, {} of {} left",
                budget.max_sandbox_executions - self.sandbox_executions,
                budget.max_sandbox_executions
            )));
        }
        self.sandbox_executions += n;
        Ok(())
    }
}

/// Backend contract for the three evolver calls.
pub trait EvolverBackend: Send + Sync {
    fn diagnose(&self, window: &[Arc<Trajectory>], view: &StateView, window_ref: WindowRef) -> Result<Diagnosis, EvolveError>;

    fn plan(&self, diagnosis: &Diagnosis, view: &StateView) -> Result<EditPlan, EvolveError>;

    /// `attempt` counts from 0; repairs receive the previous report.
    fn synthesize(
        &self,
        plan: &EditPlan,
        view: &StateView,
        attempt: u32,
        feedback: Option<&VerificationReport>,
    ) -> Result<CandidateUpdate, EvolveError>;

    /// Updating the model backbone is not supported; backends may override
    /// this to record that an update was requested.
    fn parametric_update(&self, _evidence: &[Arc<Trajectory>]) {}
}

pub fn diagnose(
    window: &[Arc<Trajectory>],
    view: &StateView,
    window_ref: WindowRef,
    backend: &dyn EvolverBackend,
    budget: &EvolveBudget,
    meter: &mut BudgetMeter,
) -> Result<Diagnosis, EvolveError> {
    if window.is_empty() {
        return Err(EvidenceError::EmptyWindow.into());
    }
    meter.charge_call(budget, "diagnose")?;
    backend.diagnose(window, view, window_ref)
}

pub fn plan(
    diagnosis: &Diagnosis,
    view: &StateView,
    backend: &dyn EvolverBackend,
    budget: &EvolveBudget,
    meter: &mut BudgetMeter,
) -> Result<EditPlan, EvolveError> {
    meter.charge_call(budget, "plan")?;
    let plan = backend.plan(diagnosis, view)?;
    validate_plan(&plan, view)?;
    Ok(plan)
}

/// Checks plan rules in order and names the first one violated.
pub fn validate_plan(plan: &EditPlan, view: &StateView) -> Result<(), EvolveError> {
    let invalid = |rule: &'static str, detail: String| Err(EvolveError::InvalidPlan { rule, detail });
    if plan.actions.is_empty() {
        return invalid("non_empty", "plan has no actions".into());
    }
    let mut targets = BTreeSet::new();
    for (i, a) in plan.actions.iter().enumerate() {
        if let Some(&d) = a.depends_on.iter().find(|&&d| d >= i) {
            return invalid("backward_dependencies", format!("action {i} depends on action {d}"));
        }
        let id = a.target_id();
        if !id.is_valid() {
            return invalid("valid_identifiers", format!("action {i} targets `{}`", a.target));
        }
        if !targets.insert(id.clone()) {
            return invalid("unique_targets", format!("`{id}` is targeted more than once"));
        }
        match a.operator {
            EditOperator::Add => {
                if view.get(&id).is_some() {
                    return invalid("fresh_add_targets", format!("action {i} adds `{id}`, which already exists"));
                }
            }
            _ => {
                if view.active(&id).is_none() {
                    return invalid("active_targets", format!("action {i} mutates `{id}`, which is not active"));
                }
            }
        }
    }
    Ok(())
}

pub fn synthesize_update(
    plan: &EditPlan,
    view: &StateView,
    backend: &dyn EvolverBackend,
    budget: &EvolveBudget,
    meter: &mut BudgetMeter,
    attempt: u32,
    feedback: Option<&VerificationReport>,
) -> Result<CandidateUpdate, EvolveError> {
    meter.charge_call(budget, "synthesize")?;
    let mut cand = backend.synthesize(plan, view, attempt, feedback)?;
    if cand.writes.len() != plan.actions.len() {
        return Err(EvolveError::MalformedBackendReply(format!(
            "{} writes for {} plan actions",
            cand.writes.len(),
            plan.actions.len()
        )));
    }
    for (i, (w, a)) in cand.writes.iter_mut().zip(&plan.actions).enumerate() {
        if w.action_index != i || w.id != a.target_id() || w.operator != a.operator {
            return Err(EvolveError::MalformedBackendReply(format!("write {i} does not match plan action {i}")));
        }
        if w.operator != EditOperator::Add && w.base_version.is_none() {
            w.base_version = view.get(&w.id).map(|r| r.version);
        }
    }
    cand.plan_ref = plan.digest();
    Ok(cand)
}

/// Everything an evolution step needs besides the backend.
pub struct StepEnv<'a> {
    pub registry: &'a Registry,
    pub audit: &'a AuditLog,
    pub sandbox: &'a Sandbox,
    pub reviews: &'a ReviewQueue,
    pub reviewer: &'a dyn Reviewer,
    pub gate_mode: GateMode,
    /// Episode index the step is attributed to.
    pub episode: u64,
    /// Print-only: no audit records, tickets or writes.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepOutcome {
    pub diagnosis: Option<Diagnosis>,
    pub plan: Option<EditPlan>,
    pub candidate: Option<CandidateUpdate>,
    pub decision: Option<CommitDecision>,
    pub report: Option<VerificationReport>,
    pub ticket: Option<ReviewTicket>,
    pub synthesis_attempts: u32,
    pub repairs_used: u32,
    pub snapshot_before: String,
    pub snapshot_after: String,
    pub budget_used: BudgetMeter,
    pub note: Option<String>,
}

impl StepOutcome {
    pub fn c(&self) -> u8 {
        self.decision.as_ref().map(|d| d.c).unwrap_or(0)
    }
}

/// One evolution step over the window ending at `end`.
pub fn run_evolution_step(
    env: &StepEnv<'_>,
    log: &EvidenceLog,
    end: u64,
    w: usize,
    budget: &EvolveBudget,
    backend: &dyn EvolverBackend,
) -> Result<StepOutcome, EvolveError> {
    if log.is_empty() {
        return Err(EvolveError::EmptyLog);
    }
    // A dry run leaves no trace, not even a recorded snapshot.
    let before = if env.dry_run {
        let view = env.registry.current_view();
        StateSnapshot { snapshot_id: view.snapshot_id().to_string(), heads: view.heads(), episode_index: env.episode, created_at: String::new() }
    } else {
        env.registry.take_snapshot(env.episode)
    };
    let view = env.registry.current_view();
    let window = log.evidence_window(end, w)?;
    let mut out = StepOutcome {
        diagnosis: None,
        plan: None,
        candidate: None,
        decision: None,
        report: None,
        ticket: None,
        synthesis_attempts: 0,
        repairs_used: 0,
        snapshot_before: before.snapshot_id.clone(),
        snapshot_after: before.snapshot_id.clone(),
        budget_used: BudgetMeter::default(),
        note: None,
    };
    let mut meter = BudgetMeter::default();
    let mut proposal_written = false;
    let result = step_inner(env, &window, WindowRef { end, w }, &view, budget, backend, &mut meter, &mut out, &mut proposal_written);
    out.budget_used = meter;
    match result {
        Ok(()) => Ok(out),
        Err(e) => {
            if env.dry_run {
                out.note = Some(e.to_string());
                return match e {
                    EvolveError::BudgetExhausted(_) => Err(e),
                    _ => Ok(out),
                };
            }
            // Every proposal ends in a commit or a rejection, including
            // steps cut short before a candidate exists.
            if !proposal_written {
                env.audit.append(
                    AuditRecordKind::Proposal,
                    env.episode,
                    json!({
                        "diagnosis": out.diagnosis,
                        "plan": out.plan,
                        "candidate_ref": Value::Null,
                        "error": e.to_string(),
                    }),
                )?;
            }
            env.audit.append(
                AuditRecordKind::Rejection,
                env.episode,
                json!({
                    "candidate_ref": out.candidate.as_ref().map(CandidateUpdate::digest),
                    "reason": e.to_string(),
                    "snapshot": before.snapshot_id,
                    "attached_checks": out.candidate.as_ref().map(|c| &c.attached_checks),
                }),
            )?;
            out.note = Some(e.to_string());
            match e {
                EvolveError::BudgetExhausted(_)
                | EvolveError::Governance(GovernanceError::SandboxUnavailable(_))
                | EvolveError::Registry(_)
                | EvolveError::Evidence(_) => Err(e),
                _ => Ok(out),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step_inner(
    env: &StepEnv<'_>,
    window: &[Arc<Trajectory>],
    window_ref: WindowRef,
    view: &StateView,
    budget: &EvolveBudget,
    backend: &dyn EvolverBackend,
    meter: &mut BudgetMeter,
    out: &mut StepOutcome,
    proposal_written: &mut bool,
) -> Result<(), EvolveError> {
    let diagnosis = diagnose(window, view, window_ref, backend, budget, meter)?;
    if diagnosis.is_empty() {
        out.diagnosis = Some(diagnosis);
        return Ok(());
    }
    out.diagnosis = Some(diagnosis.clone());
    let plan = plan(&diagnosis, view, backend, budget, meter)?;
    out.plan = Some(plan.clone());

    let mut feedback: Option<VerificationReport> = None;
    let mut accepted = None;
    for attempt in 0..=budget.max_repair_attempts {
        let mut cand = synthesize_update(&plan, view, backend, budget, meter, attempt, feedback.as_ref())?;
        cand.provenance.created_at = env.audit.now();
        out.synthesis_attempts = attempt + 1;
        out.repairs_used = attempt;
        out.candidate = Some(cand.clone());
        if attempt == 0 && !env.dry_run {
            env.audit.append(
                AuditRecordKind::Proposal,
                env.episode,
                json!({
                    "diagnosis": diagnosis,
                    "plan": plan,
                    "candidate_ref": cand.digest(),
                }),
            )?;
            *proposal_written = true;
        }
        let needed = governance::planned_executions(&cand, view);
        meter.charge_sandbox(budget, needed)?;
        let report = governance::verify(&cand, view, env.sandbox)?;
        if !env.dry_run {
            env.audit.append(
                AuditRecordKind::Verification,
                env.episode,
                json!({"attempt": attempt, "candidate_ref": cand.digest(), "report": report.stable_value()}),
            )?;
        }
        let passed = report.overall;
        out.report = Some(report.clone());
        if passed {
            accepted = Some((cand, report));
            break;
        }
        feedback = Some(report);
    }
    if env.dry_run {
        return Ok(());
    }

    let (cand, report) = match accepted {
        Some(pair) => pair,
        None => {
            // Still failing after the repair budget: c = 0.
            let cand = out.candidate.clone().expect("at least one attempt ran");
            let report = out.report.clone().expect("at least one attempt ran");
            let decision = governance::decide(&report, env.gate_mode, None)?;
            let snap = governance::apply_update(env.registry, env.audit, &cand, &report, &decision, env.episode)?;
            out.snapshot_after = snap.snapshot_id;
            out.decision = Some(decision);
            return Ok(());
        }
    };

    let mut ticket = None;
    if env.gate_mode == GateMode::Human {
        let mut t = env.reviews.open_ticket(&cand, &report, &out.snapshot_before, env.episode, env.audit)?;
        match env.reviewer.review(&t, &cand, &report) {
            ReviewerResponse::Defer => {
                out.ticket = Some(t);
                return Ok(());
            }
            ReviewerResponse::Approve(note) => {
                env.reviews.resolve(&mut t, Verdict::Approved, &note, env.audit, env.episode)?;
            }
            ReviewerResponse::Reject(note) => {
                env.reviews.resolve(&mut t, Verdict::Rejected, &note, env.audit, env.episode)?;
            }
        }
        ticket = Some(t);
    }
    let decision = governance::decide(&report, env.gate_mode, ticket.as_ref())?;
    out.ticket = ticket;
    match governance::apply_update(env.registry, env.audit, &cand, &report, &decision, env.episode) {
        Ok(snap) => {
            out.snapshot_after = snap.snapshot_id;
            out.decision = Some(decision);
        }
        Err(GovernanceError::StorageFailure(e)) => {
            // The transaction was rolled back and the rejection audited.
            out.decision = Some(CommitDecision { c: 0, ..decision });
            out.note = Some(format!("storage failure: {e}"));
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

#[cfg(test)]
mod tests;
