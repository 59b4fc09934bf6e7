//! Deterministic rule-table evolver.
//!
//! Rules, applied to signatures seen in at least [`SIGNATURE_THRESHOLD`]
//! failing trajectories of the window:
//! - `KeyError` / `TypeError`: infer the drifted fields from the latest
//!   failing records and synthesize (or patch) the record parser and the
//!   schema document;
//! - `401`: add API discovery and token tools plus two skills;
//! - anything else: add a lesson fact naming the failure.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::schema::{parser_params, parser_source, FieldFinding, FieldTable, SCHEMA_DOC};
use super::{
    AttachedCheck, CandidateUpdate, CandidateWrite, Diagnosis, EditAction, EditOperator, EditPlan, EvolveError,
    EvolverBackend, Provenance, WindowRef,
};
use crate::evidence::{mine_signatures, FailureSignature, Trajectory};
use crate::governance::VerificationReport;
use crate::harness::analyst::PARSER_TOOL;
use crate::registry::{
    ArtifactId, ArtifactKind, KnowledgeDoc, Payload, StateView, ToolParam, ToolSpec, TypeTag, ValidationCase,
};

pub const DEFAULT_PATTERNS: [&str; 5] = ["KeyError", "TypeError", "401", "timeout", "budget_exhausted"];
pub const SIGNATURE_THRESHOLD: u32 = 2;

const AUTH_PATTERN: &str = "401";
const PARSE_PATTERNS: [&str; 2] = ["KeyError", "TypeError"];

/// Which synthesis attempts emit a defective tool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DefectSchedule {
    #[default]
    None,
    /// Every tool parses but fails at runtime.
    AlwaysBroken,
    /// The first `n` attempts of every step emit a syntax error.
    FirstAttempts { n: u32 },
    /// `counts[s]` defective attempts in the `s`-th synthesis session.
    PerStep { counts: Vec<u32> },
    /// Each attempt is defective with probability `rate`.
    Seeded { seed: u64, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Defect {
    Syntax,
    Runtime,
}

impl DefectSchedule {
    fn defect(&self, session: u32, attempt: u32) -> Option<Defect> {
        let syntax = |b: bool| b.then_some(Defect::Syntax);
        match self {
            DefectSchedule::None => None,
            DefectSchedule::AlwaysBroken => Some(Defect::Runtime),
            DefectSchedule::FirstAttempts { n } => syntax(attempt < *n),
            DefectSchedule::PerStep { counts } => syntax(attempt < counts.get(session as usize).copied().unwrap_or(0)),
            DefectSchedule::Seeded { seed, rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(session) << 32) ^ u64::from(attempt));
                syntax(rng.gen_bool(rate.clamp(0.0, 1.0)))
            }
        }
    }
}

pub struct ScriptedEvolver {
    pub patterns: Vec<String>,
    pub threshold: u32,
    pub defects: DefectSchedule,
    sessions: AtomicU32,
}

impl Default for ScriptedEvolver {
    fn default() -> Self {
        Self::new(DefectSchedule::None)
    }
}

impl std::fmt::Debug for ScriptedEvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedEvolver").field("defects", &self.defects).finish()
    }
}

impl ScriptedEvolver {
    pub fn new(defects: DefectSchedule) -> Self {
        Self {
            patterns: DEFAULT_PATTERNS.iter().map(|s| s.to_string()).collect(),
            threshold: SIGNATURE_THRESHOLD,
            defects,
            sessions: AtomicU32::new(0),
        }
    }

    /// Synthesis sessions started so far (one per step that got that far).
    pub fn sessions(&self) -> u32 {
        self.sessions.load(Ordering::SeqCst)
    }
}

/// Field table currently recorded in the schema document.
pub fn current_table(view: &StateView) -> FieldTable {
    view.active(&ArtifactId::knowledge(SCHEMA_DOC))
        .and_then(|r| r.payload.as_knowledge())
        .and_then(FieldTable::from_doc)
        .unwrap_or_default()
}

fn records_of(t: &Trajectory) -> &[Value] {
    t.task.attachments.get("records").and_then(Value::as_array).map(Vec::as_slice).unwrap_or(&[])
}

fn slug(pattern: &str) -> String {
    let s: String = pattern
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        format!("p{s}")
    } else {
        s
    }
}

fn tool_action(view: &StateView, name: &str) -> EditOperator {
    if view.active(&ArtifactId::tool(name)).is_some() {
        EditOperator::Patch
    } else {
        EditOperator::Add
    }
}

const AUTH_TOOLS: [&str; 2] = ["discover_api_spec", "manage_auth_token"];

impl EvolverBackend for ScriptedEvolver {
    fn diagnose(&self, window: &[Arc<Trajectory>], view: &StateView, window_ref: WindowRef) -> Result<Diagnosis, EvolveError> {
        let failing: Vec<&Trajectory> = window.iter().map(Arc::as_ref).filter(|t| !t.success).collect();
        if failing.is_empty() {
            return Ok(Diagnosis::empty(window_ref));
        }
        let patterns: Vec<&str> = self.patterns.iter().map(String::as_str).collect();
        let mut sigs: Vec<FailureSignature> = mine_signatures(&failing, &patterns)?
            .into_iter()
            .filter(|s| s.match_count >= self.threshold)
            .map(|mut s| {
                s.window_size = window.len() as u32;
                s
            })
            .collect();

        let mut objectives = Vec::new();
        let mut findings = Vec::new();
        let mut kept = Vec::new();

        if sigs.iter().any(|s| PARSE_PATTERNS.contains(&s.pattern.as_str())) {
            let table = current_table(view);
            let latest = failing
                .iter()
                .rev()
                .find(|t| PARSE_PATTERNS.iter().any(|p| t.contains(p)) && !records_of(t).is_empty());
            if let Some(t) = latest {
                let sample = records_of(t)[0].clone();
                let drift: Vec<FieldFinding> = table.infer(&sample);
                if !drift.is_empty() {
                    let legacy = window
                        .iter()
                        .flat_map(|t| records_of(t).first())
                        .find(|r| table.normalize(r).is_ok())
                        .cloned();
                    let parts: Vec<String> = drift.iter().map(|f| format!("{} {}", f.field, f.change.as_str())).collect();
                    objectives.push(format!("schema drift: {}", parts.join(", ")));
                    findings.push(json!({
                        "rule": "schema_drift",
                        "fields": drift,
                        "sample": sample,
                        "legacy": legacy,
                    }));
                    kept.extend(PARSE_PATTERNS.iter().map(|p| p.to_string()));
                }
            }
        }
        if sigs.iter().any(|s| s.pattern == AUTH_PATTERN)
            && AUTH_TOOLS.iter().any(|n| view.get(&ArtifactId::tool(*n)).is_none())
        {
            objectives.push("authentication gap: requests rejected with 401 and no tool to discover the API or obtain a token".into());
            findings.push(json!({"rule": "authentication"}));
            kept.push(AUTH_PATTERN.to_string());
        }
        for s in &sigs {
            if PARSE_PATTERNS.contains(&s.pattern.as_str()) || s.pattern == AUTH_PATTERN {
                continue;
            }
            let name = format!("lesson_{}", slug(&s.pattern));
            if view.get(&ArtifactId::knowledge(&name)).is_some() {
                continue;
            }
            objectives.push(format!("repeated failure `{}` in {} of {} episodes", s.pattern, s.match_count, s.window_size));
            findings.push(json!({
                "rule": "lesson",
                "pattern": s.pattern,
                "name": name,
                "episodes": s.sample_episodes,
            }));
            kept.push(s.pattern.clone());
        }

        sigs.retain(|s| kept.contains(&s.pattern));
        if sigs.is_empty() {
            return Ok(Diagnosis::empty(window_ref));
        }
        let confidence = sigs
            .iter()
            .map(|s| f64::from(s.match_count) / f64::from(s.window_size.max(1)))
            .fold(0.0, f64::max)
            .min(1.0);
        let mut implicated: Vec<ArtifactId> = sigs.iter().flat_map(|s| s.implicated_artifacts.clone()).collect();
        implicated.sort();
        implicated.dedup();
        Ok(Diagnosis::new(objectives.join("; "), sigs, implicated, confidence, window_ref, findings))
    }

    fn plan(&self, diagnosis: &Diagnosis, view: &StateView) -> Result<EditPlan, EvolveError> {
        let mut actions: Vec<EditAction> = Vec::new();
        for f in &diagnosis.findings {
            let base = actions.len();
            match f["rule"].as_str() {
                Some("schema_drift") => {
                    let drift: Vec<FieldFinding> = serde_json::from_value(f["fields"].clone())
                        .map_err(|e| EvolveError::MalformedBackendReply(e.to_string()))?;
                    let table = current_table(view).with_findings(&drift);
                    actions.push(EditAction {
                        operator: tool_action(view, PARSER_TOOL),
                        target_kind: ArtifactKind::Tool,
                        target: PARSER_TOOL.into(),
                        spec: json!({"table": table, "sample": f["sample"], "legacy": f["legacy"]}),
                        depends_on: vec![],
                        rationale: diagnosis.objective.clone(),
                    });
                    let doc_op = if view.active(&ArtifactId::knowledge(SCHEMA_DOC)).is_some() {
                        EditOperator::Patch
                    } else {
                        EditOperator::Add
                    };
                    actions.push(EditAction {
                        operator: doc_op,
                        target_kind: ArtifactKind::Knowledge,
                        target: SCHEMA_DOC.into(),
                        spec: json!({"table": table}),
                        depends_on: vec![base],
                        rationale: "record the field layout the parser reads".into(),
                    });
                }
                Some("authentication") => {
                    for (i, (kind, name)) in [
                        (ArtifactKind::Tool, "discover_api_spec"),
                        (ArtifactKind::Tool, "manage_auth_token"),
                        (ArtifactKind::Knowledge, "systematic_api_exploration"),
                        (ArtifactKind::Knowledge, "authentication_workflow"),
                    ]
                    .into_iter()
                    .enumerate()
                    {
                        actions.push(EditAction {
                            operator: EditOperator::Add,
                            target_kind: kind,
                            target: name.into(),
                            spec: json!({"template": name}),
                            depends_on: if i == 2 { vec![base] } else { vec![] },
                            rationale: "requests fail with 401".into(),
                        });
                    }
                }
                Some("lesson") => {
                    actions.push(EditAction {
                        operator: EditOperator::Add,
                        target_kind: ArtifactKind::Knowledge,
                        target: f["name"].as_str().unwrap_or_default().to_string(),
                        spec: json!({"pattern": f["pattern"], "episodes": f["episodes"]}),
                        depends_on: vec![],
                        rationale: "repeated failure".into(),
                    });
                }
                _ => {}
            }
        }
        Ok(EditPlan {
            diagnosis_ref: diagnosis.id.clone(),
            actions,
            ordering_note: "tools before the documents that describe them".into(),
        })
    }

    fn synthesize(
        &self,
        plan: &EditPlan,
        view: &StateView,
        attempt: u32,
        _feedback: Option<&VerificationReport>,
    ) -> Result<CandidateUpdate, EvolveError> {
        let session = if attempt == 0 {
            self.sessions.fetch_add(1, Ordering::SeqCst)
        } else {
            self.sessions.load(Ordering::SeqCst).saturating_sub(1)
        };
        let defect = self.defects.defect(session, attempt);
        let tag: String = plan.diagnosis_ref.chars().take(8).collect();
        let mut writes = Vec::new();
        let mut checks = Vec::new();
        for (i, a) in plan.actions.iter().enumerate() {
            let id = a.target_id();
            let version = view.get(&id).map(|r| r.version + 1).unwrap_or(1);
            let payload = match (a.target_kind, a.target.as_str()) {
                (ArtifactKind::Tool, name) => {
                    let (mut tool, fixtures) = materialize_tool(name, &a.spec)?;
                    let smoke_id = ArtifactId::validation(format!("{name}_smoke_v{version}_{tag}"));
                    checks.push(AttachedCheck {
                        id: smoke_id.clone(),
                        case: ValidationCase::runtime_smoke(&id, fixtures.smoke),
                    });
                    tool.attached_checks.push(smoke_id);
                    if let Some((input, expected)) = fixtures.regression {
                        let reg_id = ArtifactId::validation(format!("{name}_regression_v{version}_{tag}"));
                        checks.push(AttachedCheck { id: reg_id.clone(), case: ValidationCase::regression(&id, input, expected) });
                        tool.attached_checks.push(reg_id);
                    }
                    match defect {
                        Some(Defect::Syntax) => tool.entrypoint = broken_syntax(&tool.entrypoint),
                        Some(Defect::Runtime) => tool.entrypoint = BROKEN_RUNTIME.into(),
                        None => {}
                    }
                    Payload::Tool(tool)
                }
                (ArtifactKind::Knowledge, name) => Payload::Knowledge(materialize_doc(name, &a.spec, version)?),
                (ArtifactKind::Validation, _) => {
                    return Err(EvolveError::MalformedBackendReply("validation cases are attached, not planned".into()))
                }
            };
            writes.push(CandidateWrite {
                action_index: i,
                operator: a.operator,
                id,
                payload: (a.operator != EditOperator::Prune).then_some(payload),
                base_version: None,
            });
        }
        Ok(CandidateUpdate {
            plan_ref: plan.digest(),
            writes,
            attached_checks: checks,
            provenance: Provenance {
                diagnosis_id: plan.diagnosis_ref.clone(),
                plan_digest: plan.digest(),
                created_at: String::new(),
                attempt,
            },
        })
    }
}

struct Fixtures {
    smoke: Value,
    regression: Option<(Value, Value)>,
}

const BROKEN_RUNTIME: &str = "import json, sys, types\nappworld = types.ModuleType('appworld')\ntry:\n    apis = appworld.list_apis()\n    print(json.dumps({'success': True, 'result': apis}))\nexcept AttributeError as e:\n    print(json.dumps({'success': False, 'error': 'AttributeError: %s' % e}))\n";

/// Drops the closing of the first call so the source no longer parses.
fn broken_syntax(src: &str) -> String {
    format!("{src}\nmain(\n")
}

fn materialize_tool(name: &str, spec: &Value) -> Result<(ToolSpec, Fixtures), EvolveError> {
    match name {
        PARSER_TOOL => {
            let table: FieldTable = serde_json::from_value(spec["table"].clone())
                .map_err(|e| EvolveError::MalformedBackendReply(format!("parser spec: {e}")))?;
            let sample = spec["sample"].clone();
            let mut inputs = vec![sample.clone()];
            if !spec["legacy"].is_null() {
                inputs.push(spec["legacy"].clone());
            }
            let expected = table
                .normalize_all(&inputs)
                .map_err(|e| EvolveError::MalformedBackendReply(format!("inferred table cannot read its sample: {e}")))?;
            let tool = ToolSpec {
                description: "Normalize raw log records to timestamp, endpoint, status and latency_ms.".into(),
                parameters: parser_params(),
                entrypoint: parser_source(&table),
                attached_checks: vec![],
            };
            Ok((
                tool,
                Fixtures {
                    smoke: json!({"records": [sample]}),
                    regression: Some((json!({"records": inputs}), Value::Array(expected))),
                },
            ))
        }
        "discover_api_spec" => Ok((
            ToolSpec {
                description: "List the available API endpoints and the parameters each one takes.".into(),
                parameters: vec![ToolParam { name: "app".into(), type_tag: TypeTag::String, required: false }],
                entrypoint: "import json, sys\nargs = json.loads(sys.stdin.read())\napp = args.get('app', 'default')\nprint(json.dumps({'success': True, 'result': {'app': app, 'apis': ['login', 'show_profile'], 'auth': 'POST login with username and password, send the token as a bearer header'}}))\n".into(),
                attached_checks: vec![],
            },
            Fixtures { smoke: json!({}), regression: None },
        )),
        "manage_auth_token" => Ok((
            ToolSpec {
                description: "Obtain and cache an access token before calling protected endpoints.".into(),
                parameters: vec![ToolParam { name: "username".into(), type_tag: TypeTag::String, required: false }],
                entrypoint: "import json, sys\nargs = json.loads(sys.stdin.read())\nuser = args.get('username', 'agent')\nprint(json.dumps({'success': True, 'result': {'header': 'Authorization: Bearer <token for %s>' % user}}))\n".into(),
                attached_checks: vec![],
            },
            Fixtures { smoke: json!({"username": "agent"}), regression: None },
        )),
        other => Err(EvolveError::MalformedBackendReply(format!("no tool template for `{other}`"))),
    }
}

fn materialize_doc(name: &str, spec: &Value, version: u32) -> Result<KnowledgeDoc, EvolveError> {
    match name {
        SCHEMA_DOC => {
            let table: FieldTable = serde_json::from_value(spec["table"].clone())
                .map_err(|e| EvolveError::MalformedBackendReply(format!("schema spec: {e}")))?;
            Ok(table.to_doc())
        }
        "systematic_api_exploration" => Ok(KnowledgeDoc::skill(
            name,
            "Explore an API before using it",
            "1. Call discover_api_spec for the app.\n2. Read the parameters of each endpoint.\n3. Only then call the endpoint.",
            &["api", "endpoint", "discover"],
            version,
        )),
        "authentication_workflow" => Ok(KnowledgeDoc::skill(
            name,
            "Authenticate before protected calls",
            "On a 401 response, call manage_auth_token, attach the returned header and retry once.",
            &["401", "auth", "token", "login"],
            version,
        )),
        lesson if lesson.starts_with("lesson_") => {
            let pattern = spec["pattern"].as_str().unwrap_or_default();
            Ok(KnowledgeDoc::fact(
                &format!("Recurring failure: {pattern}"),
                &format!(
                    "Episodes {} failed with `{pattern}`. Check for this condition before acting and prefer a cheaper route when it appears.",
                    spec["episodes"]
                ),
                &[pattern],
            ))
        }
        other => Err(EvolveError::MalformedBackendReply(format!("no document template for `{other}`"))),
    }
}
