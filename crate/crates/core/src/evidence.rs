//! Append-only store of solve trajectories, windowed reads and failure
//! signature mining.

use std::borrow::Borrow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;
use crate::registry::ArtifactId;

pub const DEFAULT_WINDOW: usize = 10;
pub const MAX_SAMPLE_EPISODES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("expected episode {expected}, got {got}")]
    NonMonotonicEpisode { expected: u64, got: u64 },
    #[error("window end {end} is out of range (log length {len})")]
    EndOutOfRange { end: u64, len: u64 },
    #[error("window is empty")]
    EmptyWindow,
    #[error("pattern set is empty")]
    EmptyPatternSet,
    #[error("total must be at least 1")]
    ZeroTotal,
    #[error("passed {passed} exceeds total {total}")]
    PassedExceedsTotal { passed: u32, total: u32 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("evidence storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub episode: u64,
    pub description: String,
    #[serde(default)]
    pub attachments: Value,
    pub check_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    ModelOutput,
    ToolCall,
    ToolResult,
    EnvFeedback,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: u32,
    pub kind: StepKind,
    pub payload: Value,
    pub is_failure: bool,
}

impl TrajectoryStep {
    /// The text patterns are matched against: the compact rendering of the
    /// payload, which includes any error text it carries.
    pub fn text(&self) -> String {
        match &self.payload {
            Value::String(s) => s.clone(),
            other => canonical::canonical_string(other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub steps: u32,
    pub tool_calls: u32,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: u64,
    pub task: TaskInput,
    pub steps: Vec<TrajectoryStep>,
    pub score: f64,
    pub success: bool,
    pub usage: Usage,
}

impl Trajectory {
    pub fn new(task: TaskInput) -> Self {
        Self {
            episode: task.episode,
            task,
            steps: Vec::new(),
            score: 0.0,
            success: false,
            usage: Usage::default(),
        }
    }

    /// Appends a step with the next dense index.
    pub fn push(&mut self, kind: StepKind, payload: Value, is_failure: bool) {
        let index = self.steps.len() as u32;
        self.steps.push(TrajectoryStep { index, kind, payload, is_failure });
    }

    pub fn set_score(&mut self, passed: u32, total: u32) -> Result<(), EvidenceError> {
        self.score = task_score(passed, total)?;
        self.success = self.score == 1.0;
        Ok(())
    }

    pub fn contains(&self, pattern: &str) -> bool {
        self.steps.iter().any(|s| s.text().contains(pattern))
    }

    /// The answer carried by a terminal `complete` action, if any.
    pub fn answer(&self) -> Option<&Value> {
        self.steps
            .iter()
            .rev()
            .filter(|s| s.kind == StepKind::ModelOutput)
            .find(|s| s.payload.get("type").and_then(Value::as_str) == Some("complete"))
            .and_then(|s| s.payload.get("answer"))
    }

    pub fn check(&self) -> Result<(), EvidenceError> {
        let bad = |m: String| Err(EvidenceError::InvalidTrajectory(m));
        if self.task.check_count < 1 {
            return bad("check_count must be at least 1".into());
        }
        if self.episode != self.task.episode {
            return bad("trajectory and task episodes differ".into());
        }
        if !(0.0..=1.0).contains(&self.score) {
            return bad(format!("score {} outside [0, 1]", self.score));
        }
        if self.success != (self.score == 1.0) {
            return bad("success flag disagrees with score".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.index as usize != i {
                return bad(format!("step {i} has index {}", step.index));
            }
            if step.kind == StepKind::ToolResult && (i == 0 || self.steps[i - 1].kind != StepKind::ToolCall) {
                return bad(format!("tool_result at step {i} does not follow a tool_call"));
            }
        }
        let acting = self
            .steps
            .iter()
            .filter(|s| matches!(s.kind, StepKind::ModelOutput | StepKind::ToolCall))
            .count() as u32;
        if acting != self.usage.steps {
            return bad(format!("usage.steps is {} but {acting} acting steps recorded", self.usage.steps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSignature {
    pub pattern: String,
    pub match_count: u32,
    pub window_size: u32,
    pub sample_episodes: Vec<u64>,
    pub implicated_artifacts: Vec<ArtifactId>,
}

/// `passed / total`.
pub fn task_score(passed: u32, total: u32) -> Result<f64, EvidenceError> {
    if total == 0 {
        return Err(EvidenceError::ZeroTotal);
    }
    if passed > total {
        return Err(EvidenceError::PassedExceedsTotal { passed, total });
    }
    Ok(f64::from(passed) / f64::from(total))
}

/// Counts, per pattern, the trajectories whose step text contains it
/// (literal, case-sensitive). Sorted by count descending, then pattern.
pub fn mine_signatures<T: Borrow<Trajectory>>(
    window: &[T],
    patterns: &[&str],
) -> Result<Vec<FailureSignature>, EvidenceError> {
    if window.is_empty() {
        return Err(EvidenceError::EmptyWindow);
    }
    if patterns.is_empty() {
        return Err(EvidenceError::EmptyPatternSet);
    }
    let texts: Vec<(u64, Vec<String>)> = window
        .iter()
        .map(|t| {
            let t = t.borrow();
            (t.episode, t.steps.iter().map(TrajectoryStep::text).collect())
        })
        .collect();
    let mut out: Vec<FailureSignature> = patterns
        .iter()
        .map(|&pattern| {
            let mut sig = FailureSignature {
                pattern: pattern.to_string(),
                match_count: 0,
                window_size: window.len() as u32,
                sample_episodes: Vec::new(),
                implicated_artifacts: Vec::new(),
            };
            for (t, (episode, step_texts)) in window.iter().zip(&texts) {
                if !step_texts.iter().any(|s| s.contains(pattern)) {
                    continue;
                }
                sig.match_count += 1;
                if sig.sample_episodes.len() < MAX_SAMPLE_EPISODES {
                    sig.sample_episodes.push(*episode);
                }
                for tool in implicated_tools(t.borrow(), step_texts, pattern) {
                    if !sig.implicated_artifacts.contains(&tool) {
                        sig.implicated_artifacts.push(tool);
                    }
                }
            }
            sig.implicated_artifacts.sort();
            sig
        })
        .collect();
    out.sort_by(|a, b| b.match_count.cmp(&a.match_count).then_with(|| a.pattern.cmp(&b.pattern)));
    Ok(out)
}

/// Tools whose failed results contain the pattern.
fn implicated_tools<'a>(
    t: &'a Trajectory,
    texts: &'a [String],
    pattern: &'a str,
) -> impl Iterator<Item = ArtifactId> + 'a {
    t.steps.iter().enumerate().filter_map(move |(i, step)| {
        if step.kind != StepKind::ToolResult || !step.is_failure || !texts[i].contains(pattern) || i == 0 {
            return None;
        }
        let name = t.steps[i - 1].payload.get("name")?.as_str()?;
        crate::registry::is_identifier(name).then(|| ArtifactId::tool(name))
    })
}

/// Append-only trajectory log, optionally persisted as JSONL (line number =
/// episode index).
#[derive(Debug, Default)]
pub struct EvidenceLog {
    path: Option<PathBuf>,
    records: RwLock<Vec<Arc<Trajectory>>>,
}

impl EvidenceLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(workspace: &Path) -> Result<Self, EvidenceError> {
        let dir = workspace.join("evidence");
        fs::create_dir_all(&dir).map_err(|e| EvidenceError::Storage(e.to_string()))?;
        let path = dir.join("trajectories.jsonl");
        let mut records = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| EvidenceError::Storage(e.to_string()))?;
            for (i, line) in text.lines().enumerate() {
                let t: Trajectory = serde_json::from_str(line)
                    .map_err(|e| EvidenceError::Storage(format!("line {}: {e}", i + 1)))?;
                if t.episode != i as u64 {
                    return Err(EvidenceError::Storage(format!("line {} holds episode {}", i + 1, t.episode)));
                }
                records.push(Arc::new(t));
            }
        }
        Ok(Self { path: Some(path), records: RwLock::new(records) })
    }

    pub fn len(&self) -> u64 {
        self.records.read().unwrap().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, episode: u64) -> Option<Arc<Trajectory>> {
        self.records.read().unwrap().get(episode as usize).cloned()
    }

    pub fn all(&self) -> Vec<Arc<Trajectory>> {
        self.records.read().unwrap().clone()
    }

    /// Appends the next episode. The record is written to disk before it
    /// becomes visible to readers.
    pub fn record_trajectory(&self, t: Trajectory) -> Result<u64, EvidenceError> {
        let mut records = self.records.write().unwrap();
        let expected = records.len() as u64;
        if t.episode != expected {
            return Err(EvidenceError::NonMonotonicEpisode { expected, got: t.episode });
        }
        t.check()?;
        if let Some(path) = &self.path {
            let mut line = canonical::canonical_bytes(&t);
            line.push(b'\n');
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| EvidenceError::Storage(e.to_string()))?;
            f.write_all(&line).map_err(|e| EvidenceError::Storage(e.to_string()))?;
        }
        records.push(Arc::new(t));
        Ok(expected)
    }

    /// The last `min(w, end + 1)` trajectories ending at `end`, oldest first.
    pub fn evidence_window(&self, end: u64, w: usize) -> Result<Vec<Arc<Trajectory>>, EvidenceError> {
        let records = self.records.read().unwrap();
        let len = records.len() as u64;
        if end >= len {
            return Err(EvidenceError::EndOutOfRange { end, len });
        }
        let w = w.max(1) as u64;
        let start = (end + 1).saturating_sub(w);
        Ok(records[start as usize..=end as usize].to_vec())
    }
}
