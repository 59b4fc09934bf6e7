//! Human review queue. Tickets are persisted under `workspace/reviews/` next
//! to the candidate and report they cover.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AuditLog, AuditRecordKind, GovernanceError, VerificationReport};
use crate::canonical;
use crate::evolver::CandidateUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TicketStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTicket {
    pub ticket_id: String,
    pub update_ref: String,
    pub status: TicketStatus,
    pub reviewer_note: String,
    pub created_at: String,
    pub resolved_at: Option<String>,
}

/// Sets the verdict on a pending ticket.
pub fn resolve_review(ticket: &ReviewTicket, verdict: Verdict, note: &str, now: &str) -> Result<ReviewTicket, GovernanceError> {
    if ticket.status != TicketStatus::Pending {
        return Err(GovernanceError::AlreadyResolved(ticket.ticket_id.clone()));
    }
    let mut t = ticket.clone();
    t.status = match verdict {
        Verdict::Approved => TicketStatus::Approved,
        Verdict::Rejected => TicketStatus::Rejected,
    };
    t.reviewer_note = note.to_string();
    t.resolved_at = Some(now.to_string());
    Ok(t)
}

pub enum ReviewerResponse {
    Approve(String),
    Reject(String),
    /// Leave the ticket pending for a later `review` command.
    Defer,
}

pub trait Reviewer: Send + Sync {
    fn review(&self, ticket: &ReviewTicket, candidate: &CandidateUpdate, report: &VerificationReport) -> ReviewerResponse;
}

/// Fallback when nobody can answer: reject, recording why.
#[derive(Debug, Default)]
pub struct AutoReject;

impl Reviewer for AutoReject {
    fn review(&self, _: &ReviewTicket, _: &CandidateUpdate, _: &VerificationReport) -> ReviewerResponse {
        ReviewerResponse::Reject("auto-rejected: no interactive reviewer".into())
    }
}

#[derive(Debug, Default)]
pub struct AutoApprove;

impl Reviewer for AutoApprove {
    fn review(&self, _: &ReviewTicket, _: &CandidateUpdate, _: &VerificationReport) -> ReviewerResponse {
        ReviewerResponse::Approve("approved".into())
    }
}

#[derive(Debug, Default)]
pub struct DeferAll;

impl Reviewer for DeferAll {
    fn review(&self, _: &ReviewTicket, _: &CandidateUpdate, _: &VerificationReport) -> ReviewerResponse {
        ReviewerResponse::Defer
    }
}

/// A ticket with the material needed to settle it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingReview {
    pub ticket: ReviewTicket,
    pub candidate: CandidateUpdate,
    pub report: VerificationReport,
    pub base_snapshot: String,
    pub episode: u64,
}

#[derive(Debug, Default)]
pub struct ReviewQueue {
    dir: Option<PathBuf>,
    items: Mutex<BTreeMap<String, PendingReview>>,
}

impl ReviewQueue {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(workspace: &Path) -> Result<Self, GovernanceError> {
        let dir = workspace.join("reviews");
        fs::create_dir_all(&dir).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
        let mut items = BTreeMap::new();
        let entries = fs::read_dir(&dir).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| GovernanceError::StorageFailure(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
            let item: PendingReview = serde_json::from_slice(&bytes)
                .map_err(|e| GovernanceError::StorageFailure(format!("{}: {e}", path.display())))?;
            items.insert(item.ticket.ticket_id.clone(), item);
        }
        Ok(Self { dir: Some(dir), items: Mutex::new(items) })
    }

    pub fn list(&self) -> Vec<PendingReview> {
        self.items.lock().unwrap().values().cloned().collect()
    }

    pub fn get(&self, ticket_id: &str) -> Option<PendingReview> {
        self.items.lock().unwrap().get(ticket_id).cloned()
    }

    fn store(&self, item: PendingReview) -> Result<(), GovernanceError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", item.ticket.ticket_id));
            crate::registry::write_atomic(&path, &canonical::canonical_bytes(&item))
                .map_err(|e| GovernanceError::StorageFailure(e.to_string()))?;
        }
        self.items.lock().unwrap().insert(item.ticket.ticket_id.clone(), item);
        Ok(())
    }

    pub fn open_ticket(
        &self,
        candidate: &CandidateUpdate,
        report: &VerificationReport,
        base_snapshot: &str,
        episode: u64,
        audit: &AuditLog,
    ) -> Result<ReviewTicket, GovernanceError> {
        let n = self.items.lock().unwrap().len() + 1;
        let ticket = ReviewTicket {
            ticket_id: format!("review_{n:04}"),
            update_ref: candidate.digest(),
            status: TicketStatus::Pending,
            reviewer_note: String::new(),
            created_at: audit.now(),
            resolved_at: None,
        };
        self.store(PendingReview {
            ticket: ticket.clone(),
            candidate: candidate.clone(),
            report: report.clone(),
            base_snapshot: base_snapshot.to_string(),
            episode,
        })?;
        Ok(ticket)
    }

    /// Resolves a ticket once, persists it and audits the review.
    pub fn resolve(
        &self,
        ticket: &mut ReviewTicket,
        verdict: Verdict,
        note: &str,
        audit: &AuditLog,
        episode: u64,
    ) -> Result<(), GovernanceError> {
        let mut item = self
            .get(&ticket.ticket_id)
            .ok_or_else(|| GovernanceError::UnknownTicket(ticket.ticket_id.clone()))?;
        let resolved = resolve_review(&item.ticket, verdict, note, &audit.now())?;
        audit.append(
            AuditRecordKind::Review,
            episode,
            json!({
                "ticket_id": resolved.ticket_id,
                "update_ref": resolved.update_ref,
                "status": resolved.status,
                "note": resolved.reviewer_note,
            }),
        )?;
        item.ticket = resolved.clone();
        self.store(item)?;
        *ticket = resolved;
        Ok(())
    }
}
