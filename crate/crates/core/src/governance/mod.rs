//! The commit gate: verification of candidates, the commit decision,
//! atomic application, rollback and the audit trail.

mod audit;
mod review;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::evolver::{CandidateUpdate, EditOperator};
use crate::registry::{
    ArtifactId, ArtifactKind, CheckKind, Payload, Registry, RegistryError, StateSnapshot, StateView, VersionedArtifact,
};
use crate::sandbox::{CheckResult, Sandbox, SandboxError};

pub use audit::{record_digest, verify_audit_chain, AuditLog, AuditRecord, AuditRecordKind};
pub use review::{
    resolve_review, AutoApprove, AutoReject, DeferAll, PendingReview, ReviewQueue, ReviewTicket, Reviewer,
    ReviewerResponse, TicketStatus, Verdict,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GovernanceError {
    #[error("stale candidate: `{id}` was based on v{base} but the head is v{head}")]
    StaleCandidate { id: ArtifactId, base: u32, head: u32 },
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("human gate needs a resolved review ticket")]
    UnresolvedTicket,
    #[error("ticket `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("unknown ticket `{0}`")]
    UnknownTicket(String),
    #[error("audit chain mismatch: tail is {expected}, record links to {got}")]
    ChainMismatch { expected: String, got: String },
    #[error("audit log {0} fails chain verification")]
    CorruptAuditLog(String),
    #[error("unknown snapshot `{0}`")]
    UnknownSnapshot(String),
    #[error("decision does not belong to this candidate: {0}")]
    MismatchedDecision(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl From<RegistryError> for GovernanceError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::UnknownSnapshot(id) => GovernanceError::UnknownSnapshot(id),
            RegistryError::StaleBase { id, base, head } => GovernanceError::StaleCandidate { id, base, head },
            other => GovernanceError::StorageFailure(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub candidate_ref: String,
    pub base_snapshot: String,
    pub checks: Vec<CheckResult>,
    pub overall: bool,
}

impl VerificationReport {
    fn new(candidate_ref: String, base_snapshot: String, checks: Vec<CheckResult>) -> Self {
        let overall = checks.iter().all(|c| c.passed);
        Self { candidate_ref, base_snapshot, checks, overall }
    }

    /// The report without timings; what the audit log and decisions refer to.
    pub fn stable_value(&self) -> Value {
        json!({
            "candidate_ref": self.candidate_ref,
            "base_snapshot": self.base_snapshot,
            "overall": self.overall,
            "checks": self.checks.iter().map(|c| json!({
                "check_id": c.check_id,
                "check_kind": c.check_kind,
                "passed": c.passed,
                "detail": c.detail,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn digest(&self) -> String {
        canonical::digest_of(&self.stable_value())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitDecision {
    pub c: u8,
    pub report_ref: String,
    pub mode: GateMode,
    pub review_ref: Option<String>,
}

/// Fails with `StaleCandidate` unless every patch, refactor and prune was
/// based on the head it targets in `view`.
pub fn check_bases(candidate: &CandidateUpdate, view: &StateView) -> Result<(), GovernanceError> {
    for w in candidate.writes.iter().filter(|w| w.operator != EditOperator::Add) {
        let head = view.get(&w.id).map(|r| r.version).unwrap_or(0);
        let base = w.base_version.unwrap_or(0);
        if base != head {
            return Err(GovernanceError::StaleCandidate { id: w.id.clone(), base, head });
        }
    }
    Ok(())
}

struct CheckPlan {
    shadow: StateView,
    structural: Vec<CheckResult>,
    syntax: Vec<(ArtifactId, Payload)>,
    runtime: Vec<(ArtifactId, VersionedArtifact)>,
    regression: Vec<(ArtifactId, VersionedArtifact)>,
}

fn structural(check_id: String, passed: bool, detail: String) -> CheckResult {
    CheckResult { check_id, check_kind: CheckKind::Schema, passed, detail, duration_ms: 0 }
}

fn plan_checks(candidate: &CandidateUpdate, view: &StateView) -> CheckPlan {
    let ops = candidate.write_ops();
    let (shadow, staged) = view.simulate(&ops, 0);
    let mut structural_checks = Vec::new();
    let attached: BTreeSet<&ArtifactId> = candidate.attached_checks.iter().map(|c| &c.id).collect();

    for (i, w) in candidate.writes.iter().enumerate() {
        let mut problems = Vec::new();
        if let Err(e) = &staged[i] {
            problems.push(e.to_string());
        }
        if w.operator != EditOperator::Prune && w.payload.is_none() {
            problems.push("write carries no payload".into());
        }
        if let Some(Payload::Tool(tool)) = &w.payload {
            let smoke = candidate
                .attached_checks
                .iter()
                .any(|c| c.case.check_kind == CheckKind::Runtime && c.case.targets.contains(&w.id));
            if !smoke {
                problems.push("tool write has no attached runtime check".into());
            }
            for c in &tool.attached_checks {
                let known = attached.contains(c)
                    || shadow.active(c).is_some_and(|r| r.id.kind == ArtifactKind::Validation);
                if !known {
                    problems.push(format!("attached check `{c}` does not resolve"));
                }
            }
        }
        let detail = if problems.is_empty() { "well-formed".to_string() } else { problems.join("; ") };
        structural_checks.push(structural(format!("structural:{}", w.id), problems.is_empty(), detail));
    }
    for (j, c) in candidate.attached_checks.iter().enumerate() {
        let mut problems = Vec::new();
        if let Err(e) = &staged[candidate.writes.len() + j] {
            problems.push(e.to_string());
        }
        for t in &c.case.targets {
            if shadow.active(t).is_none() {
                problems.push(format!("target `{t}` is not active after the update"));
            }
        }
        let detail = if problems.is_empty() { "well-formed".to_string() } else { problems.join("; ") };
        structural_checks.push(structural(format!("structural:{}", c.id), problems.is_empty(), detail));
    }

    let syntax = candidate
        .writes
        .iter()
        .filter_map(|w| match &w.payload {
            Some(p @ Payload::Tool(_)) if w.operator != EditOperator::Prune => Some((w.id.clone(), p.clone())),
            _ => None,
        })
        .collect();

    let runtime: Vec<(ArtifactId, VersionedArtifact)> = candidate
        .attached_checks
        .iter()
        .filter(|c| c.case.check_kind != CheckKind::Regression)
        .filter_map(|c| shadow.get(&c.id).map(|r| (c.id.clone(), r.clone())))
        .collect();
    let ran: BTreeSet<&ArtifactId> = runtime.iter().map(|(id, _)| id).collect();
    let written = candidate.written_ids();
    let regression = shadow
        .active_of_kind(ArtifactKind::Validation)
        .filter(|r| !ran.contains(&r.id))
        .filter(|r| {
            let case = r.payload.as_validation().expect("validation kind");
            case.targets.iter().any(|t| written.contains(t))
                // Cases pinned to an artifact that is no longer active retire with it.
                && case.targets.iter().all(|t| shadow.active(t).is_some())
        })
        .map(|r| (r.id.clone(), r.clone()))
        .collect();
    CheckPlan { shadow, structural: structural_checks, syntax, runtime, regression }
}

fn executions_for(rec: &VersionedArtifact, shadow: &StateView) -> u32 {
    let case = rec.payload.as_validation().expect("validation kind");
    if case.check_kind == CheckKind::Schema {
        return 0;
    }
    case.targets
        .iter()
        .filter(|t| t.kind == ArtifactKind::Tool && shadow.active(t).is_some())
        .count() as u32
}

/// Sandbox executions [`verify`] will perform for this candidate.
pub fn planned_executions(candidate: &CandidateUpdate, view: &StateView) -> u32 {
    let plan = plan_checks(candidate, view);
    plan.syntax.len() as u32
        + plan
            .runtime
            .iter()
            .chain(&plan.regression)
            .map(|(_, r)| executions_for(r, &plan.shadow))
            .sum::<u32>()
}

/// Runs structural, syntax, runtime and regression checks, in that order and
/// without stopping at the first failure.
pub fn verify(candidate: &CandidateUpdate, view: &StateView, sandbox: &Sandbox) -> Result<VerificationReport, GovernanceError> {
    check_bases(candidate, view)?;
    let plan = plan_checks(candidate, view);
    let mut checks = plan.structural;
    let infra = |e: SandboxError| GovernanceError::SandboxUnavailable(e.to_string());

    for (id, payload) in &plan.syntax {
        let tool = payload.as_tool().expect("syntax checks cover tools");
        let mut r = sandbox.dry_parse(tool).map_err(infra)?;
        r.check_id = format!("syntax:{id}");
        checks.push(r);
    }
    for (id, rec) in plan.runtime.iter().chain(&plan.regression) {
        let case = rec.payload.as_validation().expect("validation kind");
        let mut r = match sandbox.run_validation_case(case, &plan.shadow) {
            Ok(r) => r,
            Err(SandboxError::UnresolvableTarget(t)) => CheckResult {
                check_id: String::new(),
                check_kind: case.check_kind,
                passed: false,
                detail: format!("target `{t}` does not resolve"),
                duration_ms: 0,
            },
            Err(e) => return Err(infra(e)),
        };
        let stage = if plan.runtime.iter().any(|(rid, _)| rid == id) { "runtime" } else { "regression" };
        r.check_id = format!("{stage}:{id}");
        checks.push(r);
    }
    Ok(VerificationReport::new(candidate.digest(), view.snapshot_id().to_string(), checks))
}

/// Auto: commit iff every check passed. Human: additionally requires an
/// approved ticket; a failing report is rejected without one.
pub fn decide(report: &VerificationReport, mode: GateMode, ticket: Option<&ReviewTicket>) -> Result<CommitDecision, GovernanceError> {
    let c = match mode {
        GateMode::Auto => report.overall,
        GateMode::Human => match ticket.map(|t| t.status) {
            Some(TicketStatus::Approved) => report.overall,
            Some(TicketStatus::Rejected) => false,
            Some(TicketStatus::Pending) | None if !report.overall => false,
            Some(TicketStatus::Pending) | None => return Err(GovernanceError::UnresolvedTicket),
        },
    };
    Ok(CommitDecision {
        c: u8::from(c),
        report_ref: report.digest(),
        mode,
        review_ref: ticket.map(|t| t.ticket_id.clone()),
    })
}

/// `c = 0`: no writes, rejection audited, current snapshot returned.
/// `c = 1`: all writes in one transaction, commit audited; a storage fault
/// leaves the state untouched, audits a rejection and returns the error.
pub fn apply_update(
    registry: &Registry,
    audit: &AuditLog,
    candidate: &CandidateUpdate,
    report: &VerificationReport,
    decision: &CommitDecision,
    episode: u64,
) -> Result<StateSnapshot, GovernanceError> {
    let candidate_ref = candidate.digest();
    if report.candidate_ref != candidate_ref || decision.report_ref != report.digest() {
        return Err(GovernanceError::MismatchedDecision(candidate_ref));
    }
    if decision.c == 1 && !report.overall {
        return Err(GovernanceError::MismatchedDecision("commit decision on a failing report".into()));
    }
    let before = registry.take_snapshot(episode);
    let reject = |reason: String| {
        audit.append(
            AuditRecordKind::Rejection,
            episode,
            json!({
                "candidate_ref": candidate_ref,
                "report_ref": decision.report_ref,
                "review_ref": decision.review_ref,
                "reason": reason,
                "snapshot": before.snapshot_id,
                "attached_checks": candidate.attached_checks,
            }),
        )
    };
    if decision.c == 0 {
        let reason = if report.overall { "rejected by reviewer" } else { "verification failed" };
        reject(reason.into())?;
        return Ok(before);
    }
    check_bases(candidate, &registry.view(&before.snapshot_id)?)?;
    let provenance = audit.next_offset();
    match registry.apply(&candidate.write_ops(), Some(provenance), episode) {
        Ok(records) => {
            let after = registry.take_snapshot(episode);
            let offset = audit.append(
                AuditRecordKind::Commit,
                episode,
                json!({
                    "candidate_ref": candidate_ref,
                    "report_ref": decision.report_ref,
                    "review_ref": decision.review_ref,
                    "mode": decision.mode,
                    "writes": records.iter().map(|r| json!({"id": r.id, "version": r.version})).collect::<Vec<_>>(),
                    "snapshot_before": before.snapshot_id,
                    "snapshot_after": after.snapshot_id,
                }),
            )?;
            debug_assert_eq!(offset, provenance);
            Ok(after)
        }
        // Left for the caller to audit, like the pre-apply base check.
        Err(RegistryError::StaleBase { id, base, head }) => Err(GovernanceError::StaleCandidate { id, base, head }),
        Err(e) => {
            reject(format!("transaction aborted: {e}"))?;
            Err(GovernanceError::StorageFailure(e.to_string()))
        }
    }
}

/// Restores a recorded snapshot and audits the rollback.
pub fn rollback(
    registry: &Registry,
    audit: &AuditLog,
    snapshot_id: &str,
    episode: u64,
    note: &str,
) -> Result<StateSnapshot, GovernanceError> {
    let from = registry.current_snapshot_id();
    let restored = registry.restore_snapshot(snapshot_id)?;
    audit.append(
        AuditRecordKind::Rollback,
        episode,
        json!({"from": from, "to": restored.snapshot_id, "note": note}),
    )?;
    Ok(restored)
}

/// Resolves a stored ticket and, on approval, decides and applies the
/// candidate it covers.
pub fn settle_review(
    queue: &ReviewQueue,
    ticket_id: &str,
    verdict: Verdict,
    note: &str,
    registry: &Registry,
    audit: &AuditLog,
) -> Result<(ReviewTicket, CommitDecision, StateSnapshot), GovernanceError> {
    let item = queue.get(ticket_id).ok_or_else(|| GovernanceError::UnknownTicket(ticket_id.to_string()))?;
    let mut ticket = item.ticket.clone();
    queue.resolve(&mut ticket, verdict, note, audit, item.episode)?;
    let decision = decide(&item.report, GateMode::Human, Some(&ticket))?;
    match apply_update(registry, audit, &item.candidate, &item.report, &decision, item.episode) {
        Ok(snap) => Ok((ticket, decision, snap)),
        // The state moved on while the ticket waited; the approval cannot land.
        Err(e @ GovernanceError::StaleCandidate { .. }) => {
            audit.append(
                AuditRecordKind::Rejection,
                item.episode,
                json!({
                    "candidate_ref": item.candidate.digest(),
                    "report_ref": decision.report_ref,
                    "review_ref": decision.review_ref,
                    "reason": e.to_string(),
                    "snapshot": registry.current_snapshot_id(),
                    "attached_checks": item.candidate.attached_checks,
                }),
            )?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}
