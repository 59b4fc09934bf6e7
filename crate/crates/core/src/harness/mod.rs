//! Synthetic log-analytics environment with scheduled schema drift, oracle
//! scoring, metrics, baselines and the evolution-scaling driver.

pub mod analyst;
mod experiment;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::evidence::{TaskInput, Trajectory};
use crate::registry::is_identifier;

pub use experiment::{
    canonical_drift_suite, evaluate_held_out, run_baseline, run_scaling_experiment, three_drift_suite, write_frontier_csv,
    write_summary_json, BaselineKind, BaselineRun, FrontierPoint, ScalingConfig, ScalingResult,
};

pub const HELD_OUT_TASKS: usize = 50;
pub const ENDPOINTS: [&str; 4] = ["/api/cart", "/api/orders", "/api/search", "/api/users"];
const STATUSES: [i64; 8] = [200, 200, 200, 200, 201, 404, 500, 503];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid drift schedule: {0}")]
    InvalidSchedule(String),
    #[error("empty input")]
    EmptyInput,
    #[error("empty score list")]
    EmptyScores,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("{0}")]
    Loop(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Int,
    Float,
}

impl FieldType {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldType::String => "string",
            FieldType::Int => "int",
            FieldType::Float => "float",
        }
    }

    /// Raw JSON kind of a value, named like the field types (`int` and
    /// `float` are told apart by representation).
    pub fn kind_of(value: &Value) -> &'static str {
        match value {
            Value::String(_) => "string",
            Value::Number(n) if n.is_f64() => "float",
            Value::Number(_) => "int",
            Value::Bool(_) => "bool",
            Value::Null => "null",
            Value::Array(_) => "array",
            Value::Object(_) => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    #[serde(rename = "type")]
    pub field_type: FieldType,
    #[serde(default)]
    pub parent: Option<String>,
    /// Name of the field before any drift; fixes which quantity it carries.
    pub origin: String,
}

impl FieldDescriptor {
    fn base(name: &str, field_type: FieldType) -> Self {
        Self { name: name.into(), field_type, parent: None, origin: name.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Rename { field: String, new_name: String },
    Nest { field: String, new_parent: String },
    TypeChange { field: String, new_type: FieldType },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledMutation {
    pub episode: u64,
    pub mutation: Mutation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftEnvironment {
    pub schema: Vec<FieldDescriptor>,
    pub drift_schedule: Vec<ScheduledMutation>,
    pub records_per_task: u32,
    pub seed: u64,
}

pub fn base_schema() -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::base("timestamp", FieldType::String),
        FieldDescriptor::base("endpoint", FieldType::String),
        FieldDescriptor::base("status", FieldType::Int),
        FieldDescriptor::base("latency_ms", FieldType::Float),
    ]
}

fn apply_mutation(schema: &mut [FieldDescriptor], m: &Mutation) -> Result<(), HarnessError> {
    let invalid = |msg: String| Err(HarnessError::InvalidSchedule(msg));
    let field_name = match m {
        Mutation::Rename { field, .. } | Mutation::Nest { field, .. } | Mutation::TypeChange { field, .. } => field,
    };
    let Some(idx) = schema.iter().position(|f| &f.name == field_name) else {
        return invalid(format!("field `{field_name}` does not exist at this point"));
    };
    let parents: Vec<String> = schema.iter().filter_map(|f| f.parent.clone()).collect();
    match m {
        Mutation::Rename { new_name, .. } => {
            if !is_identifier(new_name) {
                return invalid(format!("`{new_name}` is not a valid field name"));
            }
            if schema.iter().any(|f| &f.name == new_name) || parents.contains(new_name) {
                return invalid(format!("`{new_name}` is already in use"));
            }
            schema[idx].name = new_name.clone();
        }
        Mutation::Nest { new_parent, .. } => {
            if !is_identifier(new_parent) {
                return invalid(format!("`{new_parent}` is not a valid parent name"));
            }
            if schema.iter().any(|f| &f.name == new_parent) {
                return invalid(format!("parent `{new_parent}` collides with a field"));
            }
            if schema[idx].parent.as_deref() == Some(new_parent.as_str()) {
                return invalid(format!("`{field_name}` is already under `{new_parent}`"));
            }
            schema[idx].parent = Some(new_parent.clone());
        }
        Mutation::TypeChange { new_type, .. } => {
            let from = schema[idx].field_type;
            let lossless = matches!(
                (from, new_type),
                (FieldType::Int, FieldType::String) | (FieldType::Float, FieldType::String) | (FieldType::Int, FieldType::Float)
            );
            if !lossless {
                return invalid(format!("type change {} -> {} would lose information", from.as_str(), new_type.as_str()));
            }
            schema[idx].field_type = *new_type;
        }
    }
    Ok(())
}

impl DriftEnvironment {
    pub fn new(
        schema: Vec<FieldDescriptor>,
        drift_schedule: Vec<ScheduledMutation>,
        records_per_task: u32,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let env = Self { schema, drift_schedule, records_per_task, seed };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.records_per_task == 0 {
            return Err(HarnessError::InvalidSchedule("records_per_task must be positive".into()));
        }
        let known: Vec<String> = base_schema().into_iter().map(|f| f.origin).collect();
        let mut origins: Vec<&str> = self.schema.iter().map(|f| f.origin.as_str()).collect();
        origins.sort_unstable();
        if origins.is_empty() || origins.windows(2).any(|w| w[0] == w[1]) || origins.iter().any(|o| !known.iter().any(|k| k == o)) {
            return Err(HarnessError::InvalidSchedule(
                "schema must carry distinct fields drawn from timestamp, endpoint, status and latency_ms".into(),
            ));
        }
        if self.drift_schedule.windows(2).any(|w| w[0].episode > w[1].episode) {
            return Err(HarnessError::InvalidSchedule("schedule is not sorted by episode".into()));
        }
        let mut schema = self.schema.clone();
        for s in &self.drift_schedule {
            apply_mutation(&mut schema, &s.mutation)
                .map_err(|e| HarnessError::InvalidSchedule(format!("episode {}: {e}", s.episode)))?;
        }
        Ok(())
    }

    /// The environment with every mutation scheduled at or before `t`
    /// applied, in order.
    pub fn advance_drift(&self, t: u64) -> Result<DriftEnvironment, HarnessError> {
        self.validate()?;
        let mut schema = self.schema.clone();
        for s in self.drift_schedule.iter().filter(|s| s.episode <= t) {
            apply_mutation(&mut schema, &s.mutation)?;
        }
        Ok(DriftEnvironment {
            schema,
            drift_schedule: self.drift_schedule.iter().filter(|s| s.episode > t).cloned().collect(),
            records_per_task: self.records_per_task,
            seed: self.seed,
        })
    }

    /// Schema in force at episode `t`.
    pub fn schema_at(&self, t: u64) -> Vec<FieldDescriptor> {
        let mut schema = self.schema.clone();
        for s in self.drift_schedule.iter().filter(|s| s.episode <= t) {
            apply_mutation(&mut schema, &s.mutation).expect("schedule validated at construction");
        }
        schema
    }

    /// Episode index at which every scheduled drift is in force.
    pub fn final_episode(&self) -> u64 {
        self.drift_schedule.last().map(|s| s.episode).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    P95Latency,
    ErrorCount,
    MeanLatency,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::P95Latency, Metric::ErrorCount, Metric::MeanLatency];

    pub fn description(self) -> &'static str {
        match self {
            Metric::P95Latency => "Compute the p95 latency per endpoint from the attached log records.",
            Metric::ErrorCount => "Count the error responses (status 500 or above) per endpoint in the attached log records.",
            Metric::MeanLatency => "Compute the mean latency per endpoint from the attached log records.",
        }
    }
}

/// One log line in its semantic, schema-independent form.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub timestamp: String,
    pub endpoint: String,
    pub status: i64,
    pub latency_ms: f64,
}

impl LogEntry {
    fn value_of(&self, origin: &str, ty: FieldType) -> Value {
        match (origin, ty) {
            ("timestamp", _) => json!(self.timestamp),
            ("endpoint", _) => json!(self.endpoint),
            ("status", FieldType::Int) => json!(self.status),
            ("status", FieldType::Float) => json!(self.status as f64),
            ("status", FieldType::String) => json!(self.status.to_string()),
            ("latency_ms", FieldType::String) => json!(self.latency_ms.to_string()),
            ("latency_ms", _) => json!(self.latency_ms),
            _ => Value::Null,
        }
    }

    /// Renders the entry under `schema`.
    pub fn render(&self, schema: &[FieldDescriptor]) -> Value {
        let mut out = Map::new();
        for f in schema {
            let v = self.value_of(&f.origin, f.field_type);
            match &f.parent {
                None => {
                    out.insert(f.name.clone(), v);
                }
                Some(p) => {
                    let slot = out.entry(p.clone()).or_insert_with(|| Value::Object(Map::new()));
                    slot.as_object_mut().expect("parents are objects").insert(f.name.clone(), v);
                }
            }
        }
        Value::Object(out)
    }
}

/// Per-endpoint comparison of a submitted answer against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCheck {
    pub endpoint: String,
    pub expected: f64,
}

impl AnswerCheck {
    pub fn passes(&self, answer: Option<&Value>) -> bool {
        let Some(got) = answer.and_then(|a| a.get(&self.endpoint)).and_then(Value::as_f64) else {
            return false;
        };
        (got - self.expected).abs() <= 1e-9 * self.expected.abs().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub task: TaskInput,
    pub oracle_answer: Value,
    pub checks: Vec<AnswerCheck>,
}

impl GeneratedTask {
    /// `(passed, total)` for a submitted answer.
    pub fn grade(&self, answer: Option<&Value>) -> (u32, u32) {
        let passed = self.checks.iter().filter(|c| c.passes(answer)).count() as u32;
        (passed, self.checks.len() as u32)
    }

    /// Fills the trajectory's score from its final answer.
    pub fn score(&self, traj: &mut Trajectory) {
        let (passed, total) = self.grade(traj.answer());
        traj.set_score(passed, total).expect("checks are non-empty and passed <= total");
    }
}

fn episode_rng(seed: u64, t: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t.wrapping_add(0x5851_F42D_4C95_7F2D))
}

/// Deterministic task for episode `t` under the schema in force at `t`.
pub fn generate_episode(env: &DriftEnvironment, t: u64, seed: u64) -> GeneratedTask {
    generate_with_schema(&env.schema_at(t), env.records_per_task, t, seed)
}

pub fn generate_with_schema(schema: &[FieldDescriptor], records: u32, t: u64, seed: u64) -> GeneratedTask {
    let mut rng = episode_rng(seed, t);
    let metric = Metric::ALL[rng.gen_range(0..Metric::ALL.len())];
    let mut entries: Vec<LogEntry> = (0..records.max(ENDPOINTS.len() as u32))
        .map(|i| LogEntry {
            timestamp: String::new(),
            endpoint: ENDPOINTS[i as usize % ENDPOINTS.len()].to_string(),
            status: STATUSES[rng.gen_range(0..STATUSES.len())],
            // One decimal, below 400 ms.
            latency_ms: f64::from(rng.gen_range(50..4000u32)) / 10.0,
        })
        .collect();
    entries.shuffle(&mut rng);
    for (i, e) in entries.iter_mut().enumerate() {
        let secs = t * 3600 + i as u64 * 7;
        e.timestamp = format!("2026-03-01T{:02}:{:02}:{:02}Z", (secs / 3600) % 24, (secs / 60) % 60, secs % 60);
    }
    let answer = compute_answer(metric, &entries);
    let checks = answer
        .iter()
        .map(|(endpoint, v)| AnswerCheck { endpoint: endpoint.clone(), expected: v.as_f64().expect("numeric") })
        .collect::<Vec<_>>();
    let task = TaskInput {
        episode: t,
        description: metric.description().to_string(),
        attachments: json!({
            "metric": metric,
            "records": entries.iter().map(|e| e.render(schema)).collect::<Vec<_>>(),
        }),
        check_count: checks.len() as u32,
    };
    GeneratedTask { task, oracle_answer: Value::Object(answer.into_iter().collect()), checks }
}

/// Per-endpoint metric over semantic entries.
pub fn compute_answer(metric: Metric, entries: &[LogEntry]) -> BTreeMap<String, Value> {
    let mut by_endpoint: BTreeMap<&str, Vec<&LogEntry>> = BTreeMap::new();
    for e in entries {
        by_endpoint.entry(e.endpoint.as_str()).or_default().push(e);
    }
    by_endpoint
        .into_iter()
        .map(|(ep, es)| {
            let latencies: Vec<f64> = es.iter().map(|e| e.latency_ms).collect();
            let v = match metric {
                Metric::P95Latency => json!(oracle_p95(&latencies).expect("non-empty group")),
                Metric::ErrorCount => json!(es.iter().filter(|e| e.status >= 500).count()),
                Metric::MeanLatency => json!(latencies.iter().sum::<f64>() / latencies.len() as f64),
            };
            (ep.to_string(), v)
        })
        .collect()
}

/// Nearest-rank p95: the element at `ceil(0.95 n) - 1` of the sorted list.
pub fn oracle_p95(latencies: &[f64]) -> Result<f64, HarnessError> {
    if latencies.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    // ceil(0.95 n) computed in integers to avoid 0.95 * 100 = 95.00000000000001.
    let rank = (95 * sorted.len()).div_ceil(100);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(rename = "TGC")]
    pub tgc: f64,
    #[serde(rename = "APT")]
    pub apt: f64,
    pub per_episode_scores: Vec<f64>,
    pub n: usize,
}

pub fn compute_metrics(scores: &[f64]) -> Result<MetricsSummary, HarnessError> {
    if scores.is_empty() {
        return Err(HarnessError::EmptyScores);
    }
    if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(HarnessError::ScoreOutOfRange(bad));
    }
    let n = scores.len();
    let perfect = scores.iter().filter(|&&s| s == 1.0).count();
    Ok(MetricsSummary {
        tgc: perfect as f64 / n as f64,
        apt: scores.iter().sum::<f64>() / n as f64,
        per_episode_scores: scores.to_vec(),
        n,
    })
}

#[cfg(test)]
mod tests;
