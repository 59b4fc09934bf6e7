//! Scripted solver for the log-analytics tasks.
//!
//! With a `parse_log_records` tool in context it delegates record parsing to
//! the tool; otherwise it parses records itself, strictly, against the
//! original field names and types. Either way the metric is computed from
//! the normalized entries and submitted with `complete`.

use serde_json::{json, Value};

use super::{compute_answer, FieldType, LogEntry, Metric};
use crate::evidence::{StepKind, TaskInput, TrajectoryStep};
use crate::solve::{ContextBundle, PolicyBackend, PolicyError, SolveAction};

pub const PARSER_TOOL: &str = "parse_log_records";

/// Field names and types the solver knows without any tool.
pub const CANONICAL_FIELDS: [(&str, FieldType); 4] = [
    ("timestamp", FieldType::String),
    ("endpoint", FieldType::String),
    ("status", FieldType::Int),
    ("latency_ms", FieldType::Float),
];

/// Python-style type name, matching the generated parser's messages.
pub fn py_type(value: &Value) -> &'static str {
    match FieldType::kind_of(value) {
        "string" => "str",
        "int" => "int",
        "float" => "float",
        "bool" => "bool",
        "null" => "NoneType",
        "array" => "list",
        _ => "dict",
    }
}

/// Strict parse of one record carrying the canonical field names.
pub fn parse_strict(record: &Value) -> Result<LogEntry, String> {
    let obj = record.as_object().ok_or_else(|| format!("TypeError: record is {}", py_type(record)))?;
    let get = |name: &str, ty: FieldType| -> Result<Value, String> {
        let v = obj.get(name).ok_or_else(|| format!("KeyError: '{name}'"))?;
        if FieldType::kind_of(v) != ty.as_str() {
            return Err(format!("TypeError: field '{name}' expected {}, got {}", py_name(ty), py_type(v)));
        }
        Ok(v.clone())
    };
    Ok(LogEntry {
        timestamp: get("timestamp", FieldType::String)?.as_str().unwrap_or_default().to_string(),
        endpoint: get("endpoint", FieldType::String)?.as_str().unwrap_or_default().to_string(),
        status: get("status", FieldType::Int)?.as_i64().unwrap_or_default(),
        latency_ms: get("latency_ms", FieldType::Float)?.as_f64().unwrap_or_default(),
    })
}

fn py_name(ty: FieldType) -> &'static str {
    match ty {
        FieldType::String => "str",
        FieldType::Int => "int",
        FieldType::Float => "float",
    }
}

fn finish(metric: Metric, records: &[Value]) -> SolveAction {
    match records.iter().map(parse_strict).collect::<Result<Vec<_>, _>>() {
        Ok(entries) if !entries.is_empty() => {
            SolveAction::Complete { answer: Value::Object(compute_answer(metric, &entries).into_iter().collect()) }
        }
        Ok(_) => SolveAction::Abort { reason: "no records to analyse".into() },
        Err(reason) => SolveAction::Abort { reason },
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LogAnalyst;

impl PolicyBackend for LogAnalyst {
    fn step(&self, context: &ContextBundle, task: &TaskInput, prefix: &[TrajectoryStep]) -> Result<SolveAction, PolicyError> {
        let metric: Metric = match serde_json::from_value(task.attachments["metric"].clone()) {
            Ok(m) => m,
            Err(_) => return Ok(SolveAction::Abort { reason: "task does not name a known metric".into() }),
        };
        let records = task.attachments["records"].as_array().cloned().unwrap_or_default();
        match prefix.last() {
            None if context.has_tool(PARSER_TOOL) => {
                Ok(SolveAction::ToolCall { name: PARSER_TOOL.into(), args: json!({ "records": records }) })
            }
            None => Ok(finish(metric, &records)),
            Some(last) if last.kind == StepKind::ToolResult => {
                if last.is_failure {
                    let reason = last.payload["error"].as_str().unwrap_or("tool failed").to_string();
                    return Ok(SolveAction::Abort { reason });
                }
                match last.payload["result"].as_array() {
                    Some(normalized) => Ok(finish(metric, normalized)),
                    None => Ok(SolveAction::Abort { reason: format!("{PARSER_TOOL} returned no record list") }),
                }
            }
            Some(_) => Ok(SolveAction::Abort { reason: "unexpected trajectory state".into() }),
        }
    }
}
