//! The solve phase: one episode against a frozen state view, driven by a
//! policy backend and bounded by a solve budget.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical::{self, word_count};
use crate::evidence::{StepKind, TaskInput, Trajectory, TrajectoryStep};
use crate::registry::{ArtifactId, ArtifactKind, Registry, RegistryError, StateView, ToolParam};
use crate::remote::{EndpointConfig, HttpTransport, Transport};
use crate::sandbox::{ExecutionLimits, Sandbox, SandboxError};

pub const DEFAULT_CONTEXT_LIMIT: usize = 5;
pub const BUDGET_EXHAUSTED: &str = "budget_exhausted";

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("unknown snapshot `{0}`")]
    UnknownSnapshot(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendId {
    #[default]
    Scripted,
    Remote,
}

/// Built-in deterministic solvers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedSolver {
    ImmediateComplete,
    Looping,
    EchoCaller,
    #[default]
    LogAnalyst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHandle {
    #[serde(default)]
    pub backend_id: BackendId,
    #[serde(default)]
    pub scripted: ScriptedSolver,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub sampling_temperature: f64,
    #[serde(default = "default_solver_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub endpoint_config: Option<EndpointConfig>,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_solver_tokens() -> u32 {
    4096
}

impl Default for PolicyHandle {
    fn default() -> Self {
        Self {
            backend_id: BackendId::Scripted,
            scripted: ScriptedSolver::default(),
            seed: 0,
            sampling_temperature: default_temperature(),
            max_output_tokens: default_solver_tokens(),
            endpoint_config: None,
        }
    }
}

impl PolicyHandle {
    pub fn scripted(kind: ScriptedSolver, seed: u64) -> Self {
        Self { scripted: kind, seed, ..Self::default() }
    }

    pub fn build(&self) -> Result<Box<dyn PolicyBackend>, PolicyError> {
        match self.backend_id {
            BackendId::Scripted => Ok(match self.scripted {
                ScriptedSolver::ImmediateComplete => Box::new(ImmediateComplete { seed: self.seed }),
                ScriptedSolver::Looping => Box::new(Looping),
                ScriptedSolver::EchoCaller => Box::new(EchoCaller),
                ScriptedSolver::LogAnalyst => Box::new(crate::harness::analyst::LogAnalyst),
            }),
            BackendId::Remote => {
                let cfg = self
                    .endpoint_config
                    .as_ref()
                    .ok_or_else(|| PolicyError::BackendUnavailable("remote backend needs endpoint_config".into()))?;
                Ok(Box::new(RemotePolicy::new(Arc::new(HttpTransport::new(cfg)), self)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveBudget {
    pub max_steps: u32,
    pub max_tool_calls: u32,
    pub max_tokens: u64,
}

impl Default for SolveBudget {
    fn default() -> Self {
        Self { max_steps: 16, max_tool_calls: 8, max_tokens: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SolveAction {
    ToolCall { name: String, args: Value },
    Respond { text: String },
    Complete { answer: Value },
    Abort { reason: String },
}

impl SolveAction {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SolveAction::Complete { .. } | SolveAction::Abort { .. })
    }

    /// Parses a wire action, naming the first problem found.
    pub fn from_wire(value: &Value) -> Result<Self, PolicyError> {
        let kind = value
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| PolicyError::MalformedAction("missing `type`".into()))?;
        let field = |name: &str| {
            value
                .get(name)
                .cloned()
                .ok_or_else(|| PolicyError::MalformedAction(format!("`{kind}` action is missing `{name}`")))
        };
        let text = |name: &str| -> Result<String, PolicyError> {
            field(name)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| PolicyError::MalformedAction(format!("`{name}` must be a string")))
        };
        match kind {
            "tool_call" => Ok(SolveAction::ToolCall { name: text("name")?, args: field("args")? }),
            "respond" => Ok(SolveAction::Respond { text: text("text")? }),
            "complete" => Ok(SolveAction::Complete { answer: field("answer")? }),
            "abort" => Ok(SolveAction::Abort { reason: text("reason")? }),
            other => Err(PolicyError::MalformedAction(format!("unknown action type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSignature {
    pub name: String,
    pub parameters: Vec<ToolParam>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub knowledge_docs: Vec<(ArtifactId, String)>,
    pub tool_signatures: Vec<ToolSignature>,
    pub snapshot_id: String,
}

impl ContextBundle {
    pub fn has_tool(&self, name: &str) -> bool {
        self.tool_signatures.iter().any(|t| t.name == name)
    }
}

pub fn tokens_of(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Knowledge docs ranked by trigger overlap with the task description, plus
/// every active tool signature.
pub fn build_context(view: &StateView, task: &TaskInput, limit: usize) -> ContextBundle {
    let words = tokens_of(&task.description);
    let mut docs: Vec<(usize, &ArtifactId, String)> = view
        .active_of_kind(ArtifactKind::Knowledge)
        .filter_map(|rec| {
            let doc = rec.payload.as_knowledge()?;
            let overlap = doc.triggers.iter().filter(|t| words.contains(t.as_str())).count();
            (overlap > 0).then(|| (overlap, &rec.id, doc.body.clone()))
        })
        .collect();
    docs.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    docs.truncate(limit);
    let tool_signatures = view
        .active_of_kind(ArtifactKind::Tool)
        .filter_map(|rec| {
            let tool = rec.payload.as_tool()?;
            Some(ToolSignature {
                name: rec.id.name.clone(),
                parameters: tool.parameters.clone(),
                description: tool.description.clone(),
            })
        })
        .collect();
    ContextBundle {
        knowledge_docs: docs.into_iter().map(|(_, id, body)| (id.clone(), body)).collect(),
        tool_signatures,
        snapshot_id: view.snapshot_id().to_string(),
    }
}

/// The backend contract behind the solver policy.
pub trait PolicyBackend: Send + Sync {
    fn step(
        &self,
        context: &ContextBundle,
        task: &TaskInput,
        prefix: &[TrajectoryStep],
    ) -> Result<SolveAction, PolicyError>;
}

#[derive(Debug)]
pub struct ImmediateComplete {
    pub seed: u64,
}

impl PolicyBackend for ImmediateComplete {
    fn step(&self, _: &ContextBundle, task: &TaskInput, _: &[TrajectoryStep]) -> Result<SolveAction, PolicyError> {
        Ok(SolveAction::Complete { answer: json!({"episode": task.episode, "seed": self.seed}) })
    }
}

/// Never finishes on its own.
#[derive(Debug)]
pub struct Looping;

impl PolicyBackend for Looping {
    fn step(&self, _: &ContextBundle, _: &TaskInput, prefix: &[TrajectoryStep]) -> Result<SolveAction, PolicyError> {
        Ok(SolveAction::Respond { text: format!("still thinking ({})", prefix.len()) })
    }
}

/// Calls `echo` with `{x: 1}` and completes with the tool result.
#[derive(Debug)]
pub struct EchoCaller;

impl PolicyBackend for EchoCaller {
    fn step(&self, _: &ContextBundle, _: &TaskInput, prefix: &[TrajectoryStep]) -> Result<SolveAction, PolicyError> {
        match prefix.last() {
            None => Ok(SolveAction::ToolCall { name: "echo".into(), args: json!({"x": 1}) }),
            Some(last) => Ok(SolveAction::Complete { answer: last.payload.get("result").cloned().unwrap_or(Value::Null) }),
        }
    }
}

/// Sends `{context, task, prefix}` and expects `{action}` back.
pub struct RemotePolicy {
    transport: Arc<dyn Transport>,
    temperature: f64,
    max_output_tokens: u32,
}

impl RemotePolicy {
    pub fn new(transport: Arc<dyn Transport>, handle: &PolicyHandle) -> Self {
        Self { transport, temperature: handle.sampling_temperature, max_output_tokens: handle.max_output_tokens }
    }
}

impl PolicyBackend for RemotePolicy {
    fn step(&self, context: &ContextBundle, task: &TaskInput, prefix: &[TrajectoryStep]) -> Result<SolveAction, PolicyError> {
        let request = json!({
            "context": context,
            "task": task,
            "prefix": prefix,
            "sampling_temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        });
        let reply = self.transport.exchange("solve", &request).map_err(PolicyError::BackendUnavailable)?;
        let action = reply
            .get("action")
            .ok_or_else(|| PolicyError::MalformedAction("reply has no `action`".into()))?;
        SolveAction::from_wire(action)
    }
}

/// Runs one episode against the registry state at `snapshot_id`.
pub fn run_solve_at(
    policy: &dyn PolicyBackend,
    registry: &Registry,
    snapshot_id: &str,
    sandbox: &Sandbox,
    task: &TaskInput,
    budget: &SolveBudget,
) -> Result<Trajectory, SolveError> {
    let view = registry.view(snapshot_id).map_err(|e| match e {
        RegistryError::UnknownSnapshot(id) => SolveError::UnknownSnapshot(id),
        other => SolveError::UnknownSnapshot(other.to_string()),
    })?;
    run_solve(policy, &view, sandbox, task, budget)
}

/// Loops policy steps and tool executions until a terminal action or the
/// budget runs out. Never writes to the registry; the score is left for the
/// scorer.
pub fn run_solve(
    policy: &dyn PolicyBackend,
    view: &StateView,
    sandbox: &Sandbox,
    task: &TaskInput,
    budget: &SolveBudget,
) -> Result<Trajectory, SolveError> {
    let context = build_context(view, task, DEFAULT_CONTEXT_LIMIT);
    let base_words = word_count(&task.description)
        + context.knowledge_docs.iter().map(|(_, body)| word_count(body)).sum::<u64>();
    let mut traj = Trajectory::new(task.clone());
    let exhausted = |traj: &mut Trajectory, what: &str| {
        traj.push(StepKind::Error, json!({"error": BUDGET_EXHAUSTED, "limit": what}), true);
    };
    loop {
        if traj.usage.steps >= budget.max_steps {
            exhausted(&mut traj, "max_steps");
            break;
        }
        let action = match policy.step(&context, task, &traj.steps) {
            Ok(a) => a,
            Err(e) => {
                traj.push(StepKind::Error, json!({"error": e.to_string()}), true);
                break;
            }
        };
        let rendered = canonical::canonical_string(&action);
        let observed = traj.steps.last().map(|s| word_count(&s.text())).unwrap_or(0);
        let cost = base_words + observed + word_count(&rendered);
        if traj.usage.tokens + cost > budget.max_tokens {
            exhausted(&mut traj, "max_tokens");
            break;
        }
        if matches!(action, SolveAction::ToolCall { .. }) && traj.usage.tool_calls >= budget.max_tool_calls {
            exhausted(&mut traj, "max_tool_calls");
            break;
        }
        traj.usage.tokens += cost;
        traj.usage.steps += 1;
        match action {
            SolveAction::ToolCall { name, args } => {
                traj.usage.tool_calls += 1;
                traj.push(StepKind::ToolCall, json!({"name": name, "args": args}), false);
                let result = call_tool(view, sandbox, &context, &name, &args)?;
                let failed = !result.get("success").and_then(Value::as_bool).unwrap_or(false);
                traj.push(StepKind::ToolResult, result, failed);
            }
            SolveAction::Respond { .. } => {
                traj.push(StepKind::ModelOutput, canonical::to_canonical_value(&action), false);
            }
            SolveAction::Complete { .. } => {
                traj.push(StepKind::ModelOutput, canonical::to_canonical_value(&action), false);
                break;
            }
            SolveAction::Abort { .. } => {
                traj.push(StepKind::ModelOutput, canonical::to_canonical_value(&action), true);
                break;
            }
        }
    }
    Ok(traj)
}

fn call_tool(
    view: &StateView,
    sandbox: &Sandbox,
    context: &ContextBundle,
    name: &str,
    args: &Value,
) -> Result<Value, SolveError> {
    let fail = |error: String| json!({"success": false, "error": error});
    if !context.has_tool(name) {
        return Ok(fail(format!("unknown tool `{name}`")));
    }
    let Some(tool) = view.active(&ArtifactId::tool(name)).and_then(|r| r.payload.as_tool()) else {
        return Ok(fail(format!("unknown tool `{name}`")));
    };
    match sandbox.execute_tool(tool, args, &ExecutionLimits::default()) {
        Ok(result) => Ok(result.to_document()),
        Err(SandboxError::SignatureViolation(e)) => Ok(fail(format!("signature violation: {e}"))),
        Err(e) => Err(e.into()),
    }
}
