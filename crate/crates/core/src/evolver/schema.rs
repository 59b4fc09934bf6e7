//! Field table for log records: where each canonical field can be found in
//! a raw record and under which raw type. Shared by schema inference, the
//! reference normalizer and the generated parser tool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::harness::analyst::{py_type, CANONICAL_FIELDS, PARSER_TOOL};
use crate::harness::FieldType;
use crate::registry::{DocType, KnowledgeDoc, ToolParam, ToolSpec, TypeTag};

pub const SCHEMA_DOC: &str = "log_schema";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alias {
    pub path: Vec<String>,
    /// Raw JSON kind expected at `path` (`string`, `int` or `float`).
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldInfo {
    #[serde(rename = "type")]
    pub field_type: FieldType,
    /// Tried in order; the newest layout comes first.
    pub aliases: Vec<Alias>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldTable {
    pub fields: BTreeMap<String, FieldInfo>,
}

impl Default for FieldTable {
    fn default() -> Self {
        let fields = CANONICAL_FIELDS
            .iter()
            .map(|(name, ty)| {
                let alias = Alias { path: vec![name.to_string()], raw: ty.as_str().to_string() };
                (name.to_string(), FieldInfo { field_type: *ty, aliases: vec![alias] })
            })
            .collect();
        Self { fields }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Change {
    Renamed,
    Nested,
    Retyped,
}

impl Change {
    pub fn as_str(self) -> &'static str {
        match self {
            Change::Renamed => "renamed",
            Change::Nested => "nested",
            Change::Retyped => "retyped",
        }
    }
}

/// One field whose known aliases no longer match, and where it went.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldFinding {
    pub field: String,
    pub change: Change,
    pub alias: Alias,
}

fn lookup<'a>(record: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(record, |v, seg| v.as_object()?.get(seg))
}

fn leaves(record: &Value) -> Vec<(Vec<String>, &Value)> {
    fn walk<'a>(v: &'a Value, prefix: &mut Vec<String>, out: &mut Vec<(Vec<String>, &'a Value)>) {
        match v.as_object() {
            Some(obj) => {
                for (k, child) in obj {
                    prefix.push(k.clone());
                    walk(child, prefix, out);
                    prefix.pop();
                }
            }
            None if !prefix.is_empty() => out.push((prefix.clone(), v)),
            None => {}
        }
    }
    let mut out = Vec::new();
    walk(record, &mut Vec::new(), &mut out);
    out
}

/// Raw kinds a canonical type can be recovered from without loss.
fn compatible(ty: FieldType, raw: &str) -> bool {
    match ty {
        FieldType::String => raw == "string",
        FieldType::Int | FieldType::Float => matches!(raw, "int" | "float" | "string"),
    }
}

fn convert(ty: FieldType, raw: &Value) -> Option<Value> {
    match (ty, raw) {
        (FieldType::String, Value::String(s)) => Some(json!(s)),
        (FieldType::Float, Value::Number(n)) => n.as_f64().map(|f| json!(f)),
        (FieldType::Float, Value::String(s)) => s.trim().parse::<f64>().ok().map(|f| json!(f)),
        (FieldType::Int, Value::Number(n)) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64)).map(|i| json!(i)),
        (FieldType::Int, Value::String(s)) => s.trim().parse::<i64>().ok().map(|i| json!(i)),
        _ => None,
    }
}

impl FieldTable {
    pub fn from_doc(doc: &KnowledgeDoc) -> Option<Self> {
        serde_json::from_str(&doc.body).ok()
    }

    pub fn to_doc(&self) -> KnowledgeDoc {
        KnowledgeDoc {
            doc_type: DocType::Schema,
            title: "Log record schema".into(),
            body: crate::canonical::canonical_string(self),
            triggers: ["log", "records", "latency", "endpoint", "status"].iter().map(|s| s.to_string()).collect(),
            frontmatter: BTreeMap::new(),
        }
    }

    /// Normalizes one record to the canonical names and types. Errors use the
    /// same wording as the generated tool.
    pub fn normalize(&self, record: &Value) -> Result<Value, String> {
        let mut out = Map::new();
        for (name, info) in &self.fields {
            let mut mistyped = None;
            let mut found = None;
            for alias in &info.aliases {
                let Some(v) = lookup(record, &alias.path) else { continue };
                if FieldType::kind_of(v) != alias.raw {
                    mistyped.get_or_insert(v);
                    continue;
                }
                found = convert(info.field_type, v);
                if found.is_some() {
                    break;
                }
            }
            match (found, mistyped) {
                (Some(v), _) => {
                    out.insert(name.clone(), v);
                }
                (None, Some(v)) => {
                    let want = match info.field_type {
                        FieldType::String => "str",
                        FieldType::Int => "int",
                        FieldType::Float => "float",
                    };
                    return Err(format!("TypeError: field '{name}' expected {want}, got {}", py_type(v)));
                }
                (None, None) => return Err(format!("KeyError: '{name}'")),
            }
        }
        Ok(Value::Object(out))
    }

    pub fn normalize_all(&self, records: &[Value]) -> Result<Vec<Value>, String> {
        records.iter().map(|r| self.normalize(r)).collect()
    }

    /// Matches the fields the table cannot read in `record` against the
    /// record's unclaimed leaves.
    pub fn infer(&self, record: &Value) -> Vec<FieldFinding> {
        let all = leaves(record);
        let mut claimed: Vec<Vec<String>> = Vec::new();
        let mut broken = Vec::new();
        for (name, info) in &self.fields {
            let ok = info.aliases.iter().find(|a| {
                lookup(record, &a.path).is_some_and(|v| FieldType::kind_of(v) == a.raw && convert(info.field_type, v).is_some())
            });
            match ok {
                Some(a) => claimed.push(a.path.clone()),
                None => broken.push((name, info)),
            }
        }
        let mut findings = Vec::new();
        for (name, info) in broken {
            let free: Vec<&(Vec<String>, &Value)> = all.iter().filter(|(p, _)| !claimed.contains(p)).collect();
            let kind = |v: &Value| FieldType::kind_of(v).to_string();
            // Same place, different representation.
            let retyped = info.aliases.iter().find_map(|a| {
                let v = lookup(record, &a.path)?;
                (compatible(info.field_type, FieldType::kind_of(v)) && !v.is_object())
                    .then(|| (Change::Retyped, Alias { path: a.path.clone(), raw: kind(v) }))
            });
            // Same key, moved under another parent.
            let moved = || {
                info.aliases.iter().find_map(|a| {
                    let last = a.path.last()?;
                    free.iter()
                        .find(|(p, v)| p.last() == Some(last) && p != &a.path && compatible(info.field_type, FieldType::kind_of(v)))
                        .map(|(p, v)| (Change::Nested, Alias { path: p.clone(), raw: kind(v) }))
                })
            };
            // A single unexplained leaf of a usable type.
            let renamed = || {
                let known: Vec<&String> = self.fields.values().flat_map(|f| f.aliases.iter().filter_map(|a| a.path.last())).collect();
                let mut c = free
                    .iter()
                    .filter(|(p, v)| compatible(info.field_type, FieldType::kind_of(v)) && !known.contains(&p.last().unwrap()));
                match (c.next(), c.next()) {
                    (Some((p, v)), None) => Some((Change::Renamed, Alias { path: p.clone(), raw: kind(v) })),
                    _ => None,
                }
            };
            if let Some((change, alias)) = retyped.or_else(moved).or_else(renamed) {
                claimed.push(alias.path.clone());
                findings.push(FieldFinding { field: name.clone(), change, alias });
            }
        }
        findings
    }

    /// The table with each finding's alias tried first.
    pub fn with_findings(&self, findings: &[FieldFinding]) -> FieldTable {
        let mut out = self.clone();
        for f in findings {
            if let Some(info) = out.fields.get_mut(&f.field) {
                info.aliases.retain(|a| a != &f.alias);
                info.aliases.insert(0, f.alias.clone());
            }
        }
        out
    }
}

/// Source of the parser tool for `table`.
pub fn parser_source(table: &FieldTable) -> String {
    let fields = crate::canonical::canonical_string(table);
    let literal = serde_json::to_string(&fields).expect("strings serialize");
    format!(
        r#"import json, sys

FIELDS = json.loads({literal})["fields"]
PY = {{"string": "str", "int": "int", "float": "float"}}


def kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "string"
    return "other"


def lookup(record, path):
    v = record
    for seg in path:
        if not isinstance(v, dict) or seg not in v:
            return None, False
        v = v[seg]
    return v, True


def convert(ty, v):
    if ty == "string":
        return v if isinstance(v, str) else None
    try:
        if ty == "float":
            return float(v)
        return int(v)
    except (TypeError, ValueError):
        return None


def normalize(record):
    out = {{}}
    for name in sorted(FIELDS):
        info = FIELDS[name]
        found = None
        mistyped = None
        for alias in info["aliases"]:
            v, ok = lookup(record, alias["path"])
            if not ok:
                continue
            if kind(v) != alias["raw"]:
                if mistyped is None:
                    mistyped = v
                continue
            found = convert(info["type"], v)
            if found is not None:
                break
        if found is None:
            if mistyped is not None:
                raise ValueError("TypeError: field '%s' expected %s, got %s" % (name, PY[info["type"]], type(mistyped).__name__))
            raise ValueError("KeyError: '%s'" % name)
        out[name] = found
    return out


def main():
    args = json.loads(sys.stdin.read())
    try:
        result = [normalize(r) for r in args["records"]]
    except ValueError as e:
        print(json.dumps({{"success": False, "error": str(e)}}))
        return
    print(json.dumps({{"success": True, "result": result}}))


main()
"#
    )
}

pub fn parser_params() -> Vec<ToolParam> {
    vec![ToolParam { name: "records".into(), type_tag: TypeTag::Array, required: true }]
}

pub fn parser_tool(table: &FieldTable, attached_checks: Vec<crate::registry::ArtifactId>) -> ToolSpec {
    ToolSpec {
        description: format!("{PARSER_TOOL}: normalize raw log records to timestamp, endpoint, status and latency_ms"),
        parameters: parser_params(),
        entrypoint: parser_source(table),
        attached_checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_with_schema, DriftEnvironment, Mutation, ScheduledMutation};

    fn drifted(m: Mutation) -> Vec<Value> {
        let env = DriftEnvironment::new(
            crate::harness::base_schema(),
            vec![ScheduledMutation { episode: 1, mutation: m }],
            8,
            3,
        )
        .unwrap();
        let task = generate_with_schema(&env.schema_at(1), 8, 1, 3);
        task.task.attachments["records"].as_array().unwrap().clone()
    }

    #[test]
    fn default_table_reads_base_records() {
        let recs = drifted(Mutation::Rename { field: "timestamp".into(), new_name: "ts".into() });
        let base = generate_with_schema(&crate::harness::base_schema(), 8, 1, 3);
        let base_recs = base.task.attachments["records"].as_array().unwrap();
        let t = FieldTable::default();
        assert!(t.normalize_all(base_recs).is_ok());
        assert_eq!(t.normalize(&recs[0]), Err("KeyError: 'timestamp'".into()));
    }

    #[test]
    fn rename_is_inferred() {
        let recs = drifted(Mutation::Rename { field: "latency_ms".into(), new_name: "latency_millis".into() });
        let t = FieldTable::default();
        let f = t.infer(&recs[0]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].field, "latency_ms");
        assert_eq!(f[0].change, Change::Renamed);
        assert_eq!(f[0].alias.path, vec!["latency_millis".to_string()]);
        assert!(t.with_findings(&f).normalize_all(&recs).is_ok());
    }

    #[test]
    fn nest_and_retype_are_inferred() {
        let recs = drifted(Mutation::Nest { field: "status".into(), new_parent: "http".into() });
        let f = FieldTable::default().infer(&recs[0]);
        assert_eq!((f[0].change, f[0].alias.path.clone()), (Change::Nested, vec!["http".to_string(), "status".to_string()]));

        let recs = drifted(Mutation::TypeChange { field: "latency_ms".into(), new_type: FieldType::String });
        let t = FieldTable::default();
        assert_eq!(
            t.normalize(&recs[0]),
            Err("TypeError: field 'latency_ms' expected float, got str".into())
        );
        let f = t.infer(&recs[0]);
        assert_eq!((f[0].change, f[0].alias.raw.as_str()), (Change::Retyped, "string"));
        let fixed = t.with_findings(&f);
        assert!(fixed.normalize_all(&recs).is_ok());
    }

    #[test]
    fn readable_records_yield_no_findings() {
        let base = generate_with_schema(&crate::harness::base_schema(), 8, 2, 9);
        let recs = base.task.attachments["records"].as_array().unwrap();
        assert!(FieldTable::default().infer(&recs[0]).is_empty());
    }

    #[test]
    fn doc_round_trip() {
        let t = FieldTable::default();
        assert_eq!(FieldTable::from_doc(&t.to_doc()), Some(t));
    }
}
