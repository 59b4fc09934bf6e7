use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::skill;
use crate::canonical;
use crate::sandbox::ExecutionLimits;

pub const MAX_NAME_LEN: usize = 128;

/// Lowercase words joined by single underscores, e.g. `parse_log_records`.
pub fn is_identifier(name: &str) -> bool {
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return false;
    }
    name.split('_').all(|word| {
        !word.is_empty()
            && word
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
    }) && name.starts_with(|c: char| c.is_ascii_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Knowledge,
    Tool,
    Validation,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [Self::Knowledge, Self::Tool, Self::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Knowledge => "knowledge",
            Self::Tool => "tool",
            Self::Validation => "validation",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge" => Ok(Self::Knowledge),
            "tool" => Ok(Self::Tool),
            "validation" => Ok(Self::Validation),
            other => Err(format!("unknown artifact kind `{other}`")),
        }
    }
}

/// `(kind, name)`; rendered and serialized as `kind/name`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactId {
    pub kind: ArtifactKind,
    pub name: String,
}

impl ArtifactId {
    pub fn new(kind: ArtifactKind, name: impl Into<String>) -> Self {
        Self {
            kind,
            name: name.into(),
        }
    }

    pub fn tool(name: impl Into<String>) -> Self {
        Self::new(ArtifactKind::Tool, name)
    }

    pub fn knowledge(name: impl Into<String>) -> Self {
        Self::new(ArtifactKind::Knowledge, name)
    }

    pub fn validation(name: impl Into<String>) -> Self {
        Self::new(ArtifactKind::Validation, name)
    }

    pub fn is_valid(&self) -> bool {
        is_identifier(&self.name)
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.name)
    }
}

impl FromStr for ArtifactId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, name) = s
            .split_once('/')
            .ok_or_else(|| format!("artifact id `{s}` is not of the form kind/name"))?;
        let id = ArtifactId::new(kind.parse()?, name);
        if !id.is_valid() {
            return Err(format!("`{name}` is not a valid artifact name"));
        }
        Ok(id)
    }
}

impl Serialize for ArtifactId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArtifactId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    String,
    Int,
    Float,
    Bool,
    Object,
    Array,
}

impl TypeTag {
    pub fn accepts(self, value: &Value) -> bool {
        match self {
            TypeTag::String => value.is_string(),
            TypeTag::Int => value.is_i64() || value.is_u64(),
            TypeTag::Float => value.is_number(),
            TypeTag::Bool => value.is_boolean(),
            TypeTag::Object => value.is_object(),
            TypeTag::Array => value.is_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    pub type_tag: TypeTag,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub description: String,
    pub parameters: Vec<ToolParam>,
    pub entrypoint: String,
    #[serde(default)]
    pub attached_checks: Vec<ArtifactId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocType {
    Fact,
    Schema,
    Workflow,
    Skill,
    Exemplar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub doc_type: DocType,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub frontmatter: BTreeMap<String, String>,
}

impl KnowledgeDoc {
    /// Builds a skill document whose frontmatter mirrors its name, triggers
    /// and version.
    pub fn skill(name: &str, title: &str, body: &str, triggers: &[&str], version: u32) -> Self {
        let triggers: Vec<String> = triggers.iter().map(|t| t.to_string()).collect();
        let mut frontmatter = BTreeMap::new();
        frontmatter.insert("name".into(), name.to_string());
        frontmatter.insert("type".into(), "skill".into());
        frontmatter.insert("triggers".into(), triggers.join(", "));
        frontmatter.insert("version".into(), version.to_string());
        Self {
            doc_type: DocType::Skill,
            title: title.into(),
            body: body.into(),
            triggers,
            frontmatter,
        }
    }

    pub fn fact(title: &str, body: &str, triggers: &[&str]) -> Self {
        Self {
            doc_type: DocType::Fact,
            title: title.into(),
            body: body.into(),
            triggers: triggers.iter().map(|t| t.to_string()).collect(),
            frontmatter: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Syntax,
    Schema,
    Runtime,
    Regression,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Syntax => "syntax",
            CheckKind::Schema => "schema",
            CheckKind::Runtime => "runtime",
            CheckKind::Regression => "regression",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "predicate", content = "value")]
pub enum Expectation {
    SuccessFlagTrue,
    ExactMatch(Value),
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCase {
    pub check_kind: CheckKind,
    pub targets: Vec<ArtifactId>,
    #[serde(default)]
    pub fixture_input: Option<Value>,
    pub expectation: Expectation,
    #[serde(default)]
    pub limits: ExecutionLimits,
}

impl ValidationCase {
    pub fn runtime_smoke(tool: &ArtifactId, fixture: Value) -> Self {
        Self {
            check_kind: CheckKind::Runtime,
            targets: vec![tool.clone()],
            fixture_input: Some(fixture),
            expectation: Expectation::SuccessFlagTrue,
            limits: ExecutionLimits::default(),
        }
    }

    pub fn regression(tool: &ArtifactId, fixture: Value, expected: Value) -> Self {
        Self {
            check_kind: CheckKind::Regression,
            targets: vec![tool.clone()],
            fixture_input: Some(fixture),
            expectation: Expectation::ExactMatch(expected),
            limits: ExecutionLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "spec")]
pub enum Payload {
    Knowledge(KnowledgeDoc),
    Tool(ToolSpec),
    Validation(ValidationCase),
}

impl Payload {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Payload::Knowledge(_) => ArtifactKind::Knowledge,
            Payload::Tool(_) => ArtifactKind::Tool,
            Payload::Validation(_) => ArtifactKind::Validation,
        }
    }

    pub fn as_tool(&self) -> Option<&ToolSpec> {
        match self {
            Payload::Tool(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_knowledge(&self) -> Option<&KnowledgeDoc> {
        match self {
            Payload::Knowledge(k) => Some(k),
            _ => None,
        }
    }

    pub fn as_validation(&self) -> Option<&ValidationCase> {
        match self {
            Payload::Validation(v) => Some(v),
            _ => None,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(self)
    }

    pub fn digest(&self) -> String {
        canonical::sha256_hex(&self.canonical_bytes())
    }

    /// Checks the payload's own type invariants. Cross-artifact references
    /// (validation targets, attached checks) are resolved by the gate.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Payload::Tool(tool) => {
                if tool.entrypoint.trim().is_empty() {
                    return Err("tool entrypoint is empty".into());
                }
                let mut seen = BTreeSet::new();
                for p in &tool.parameters {
                    if !is_identifier(&p.name) {
                        return Err(format!("parameter name `{}` is not an identifier", p.name));
                    }
                    if !seen.insert(p.name.as_str()) {
                        return Err(format!("duplicate parameter `{}`", p.name));
                    }
                }
                if let Some(bad) = tool.attached_checks.iter().find(|c| c.kind != ArtifactKind::Validation) {
                    return Err(format!("attached check `{bad}` is not a validation artifact"));
                }
                Ok(())
            }
            Payload::Knowledge(doc) => {
                if doc.title.trim().is_empty() {
                    return Err("knowledge title is empty".into());
                }
                if let Some(t) = doc
                    .triggers
                    .iter()
                    .find(|t| t.is_empty() || t.chars().any(|c| c.is_uppercase() || c.is_whitespace()))
                {
                    return Err(format!("trigger `{t}` is not a lowercase keyword"));
                }
                if matches!(doc.doc_type, DocType::Skill | DocType::Workflow) && doc.triggers.is_empty() {
                    return Err("skill and workflow documents need at least one trigger".into());
                }
                if doc.doc_type == DocType::Skill {
                    skill::check_frontmatter(doc)?;
                }
                Ok(())
            }
            Payload::Validation(case) => {
                if case.targets.is_empty() {
                    return Err("validation case has no targets".into());
                }
                if let Some(t) = case.targets.iter().find(|t| !t.is_valid()) {
                    return Err(format!("target `{t}` is not a valid id"));
                }
                case.limits.validate()?;
                let needs_fixture = matches!(case.check_kind, CheckKind::Runtime | CheckKind::Regression);
                if needs_fixture && case.fixture_input.is_none() {
                    return Err(format!("{} case requires a fixture_input", case.check_kind));
                }
                if case.check_kind == CheckKind::Regression
                    && matches!(case.expectation, Expectation::SuccessFlagTrue)
                {
                    return Err("regression case needs an exact_match or contains expectation".into());
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactStatus {
    Active,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedArtifact {
    pub id: ArtifactId,
    pub version: u32,
    pub content_digest: String,
    pub payload: Payload,
    pub status: ArtifactStatus,
    /// Offset of the audit record that introduced this version; `None` for
    /// bootstrap seeding outside the gate.
    pub provenance_ref: Option<u64>,
    pub created_episode: u64,
}

impl VersionedArtifact {
    pub fn is_active(&self) -> bool {
        self.status == ArtifactStatus::Active
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifier_grammar() {
        assert!(is_identifier("echo"));
        assert!(is_identifier("parse_log_records"));
        assert!(is_identifier("v2_parser"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("Echo"));
        assert!(!is_identifier("_echo"));
        assert!(!is_identifier("echo__x"));
        assert!(!is_identifier("echo_"));
        assert!(!is_identifier("2fast"));
        assert!(!is_identifier("has-dash"));
        assert!(is_identifier(&"a".repeat(128)));
        assert!(!is_identifier(&"a".repeat(129)));
    }

    #[test]
    fn id_roundtrips_through_string() {
        let id: ArtifactId = "tool/echo".parse().unwrap();
        assert_eq!(id, ArtifactId::tool("echo"));
        assert_eq!(serde_json::to_string(&id).unwrap(), "\"tool/echo\"");
        assert!("tool/Echo".parse::<ArtifactId>().is_err());
        assert!("widget/echo".parse::<ArtifactId>().is_err());
    }

    #[test]
    fn skill_requires_frontmatter() {
        let mut doc = KnowledgeDoc::skill("auth", "Auth", "log in first", &["login"], 1);
        assert!(Payload::Knowledge(doc.clone()).validate().is_ok());
        doc.frontmatter.remove("version");
        assert!(Payload::Knowledge(doc).validate().is_err());
    }

    #[test]
    fn tool_invariants() {
        let mut tool = ToolSpec {
            description: "x".into(),
            parameters: vec![
                ToolParam { name: "a".into(), type_tag: TypeTag::Int, required: true },
                ToolParam { name: "a".into(), type_tag: TypeTag::Int, required: false },
            ],
            entrypoint: "print(1)".into(),
            attached_checks: vec![],
        };
        assert!(Payload::Tool(tool.clone()).validate().unwrap_err().contains("duplicate"));
        tool.parameters.pop();
        tool.entrypoint = "  ".into();
        assert!(Payload::Tool(tool).validate().unwrap_err().contains("empty"));
    }

    #[test]
    fn regression_needs_fixture_and_real_expectation() {
        let tool = ArtifactId::tool("echo");
        let mut case = ValidationCase::regression(&tool, serde_json::json!({}), serde_json::json!(1));
        assert!(Payload::Validation(case.clone()).validate().is_ok());
        case.expectation = Expectation::SuccessFlagTrue;
        assert!(Payload::Validation(case.clone()).validate().is_err());
        case.expectation = Expectation::Contains("x".into());
        case.fixture_input = None;
        assert!(Payload::Validation(case).validate().is_err());
    }
}
