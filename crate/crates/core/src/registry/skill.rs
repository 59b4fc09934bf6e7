//! Skill documents rendered as markdown with a `---` delimited frontmatter
//! block (`key: value` lines) followed by the body.

use std::collections::BTreeMap;

use super::types::{DocType, KnowledgeDoc};

pub const REQUIRED_KEYS: [&str; 4] = ["name", "type", "triggers", "version"];

pub fn render(doc: &KnowledgeDoc) -> String {
    let mut out = String::from("---\n");
    for (k, v) in &doc.frontmatter {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(v);
        out.push('\n');
    }
    out.push_str("---\n");
    out.push_str(&doc.body);
    out
}

/// Splits a rendered skill file into its frontmatter map and body.
pub fn parse(text: &str) -> Result<(BTreeMap<String, String>, String), String> {
    let mut lines = text.split_inclusive('\n');
    let mut consumed = match lines.next() {
        Some(first) if first.trim_end_matches(['\n', '\r']) == "---" => first.len(),
        _ => return Err("skill file must start with a `---` line".into()),
    };
    let mut map = BTreeMap::new();
    let mut closed = false;
    for line in lines.by_ref() {
        consumed += line.len();
        let content = line.trim_end_matches(['\n', '\r']);
        if content == "---" {
            closed = true;
            break;
        }
        let (k, v) = content
            .split_once(':')
            .ok_or_else(|| format!("frontmatter line `{content}` is not `key: value`"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if !closed {
        return Err("frontmatter block is not closed".into());
    }
    Ok((map, text[consumed..].to_string()))
}

pub(crate) fn check_frontmatter(doc: &KnowledgeDoc) -> Result<(), String> {
    for key in REQUIRED_KEYS {
        match doc.frontmatter.get(key) {
            Some(v) if !v.trim().is_empty() => {}
            _ => return Err(format!("skill frontmatter is missing `{key}`")),
        }
    }
    if doc.frontmatter.get("type").map(String::as_str) != Some("skill") {
        return Err("skill frontmatter `type` must be `skill`".into());
    }
    if doc.frontmatter["version"].parse::<u32>().is_err() {
        return Err("skill frontmatter `version` must be an integer".into());
    }
    if doc.frontmatter.values().any(|v| v.contains('\n')) || doc.frontmatter.keys().any(|k| k.contains([':', '\n'])) {
        return Err("frontmatter keys and values must be single-line".into());
    }
    let (parsed, body) = parse(&render(doc))?;
    if parsed != doc.frontmatter || body != doc.body {
        return Err("skill does not survive a frontmatter round trip".into());
    }
    Ok(())
}

/// Reads a rendered skill file into a knowledge document.
pub fn from_markdown(title: &str, text: &str) -> Result<KnowledgeDoc, String> {
    let (frontmatter, body) = parse(text)?;
    let triggers = frontmatter
        .get("triggers")
        .map(|t| {
            t.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let doc = KnowledgeDoc {
        doc_type: DocType::Skill,
        title: title.to_string(),
        body,
        triggers,
        frontmatter,
    };
    check_frontmatter(&doc)?;
    Ok(doc)
}
