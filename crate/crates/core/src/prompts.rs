//! Versioned prompt templates with `{name}` placeholders.

use thiserror::Error;

pub const SEED_QUERY_V1: &str = include_str!("../prompts/seed_query.v1.txt");
pub const COMPLEXIFY_QUERY_V1: &str = include_str!("../prompts/complexify_query.v1.txt");
pub const GUIDELINE_V1: &str = include_str!("../prompts/guideline.v1.txt");
pub const QA_GATE_V1: &str = include_str!("../prompts/qa_gate.v1.txt");
pub const AGENT_SYSTEM_V1: &str = include_str!("../prompts/agent_system.v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template placeholder {{{0}}} has no value")]
    MissingVariable(String),
}

fn placeholder_at(s: &str) -> Option<&str> {
    let rest = s.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    let valid = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
    valid.then_some(name)
}

/// Substitute `{name}` placeholders in one pass; inserted values are never
/// rescanned. Braces that do not enclose a lowercase identifier (such as
/// JSON examples) are left alone.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    while let Some(off) = template[i..].find('{') {
        let at = i + off;
        out.push_str(&template[i..at]);
        match placeholder_at(&template[at..]) {
            Some(name) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::MissingVariable(name.to_string()))?;
                out.push_str(value);
                i = at + name.len() + 2;
            }
            None => {
                out.push('{');
                i = at + 1;
            }
        }
    }
    out.push_str(&template[i..]);
    Ok(out)
}

/// Placeholder names in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (at, _) in template.match_indices('{') {
        if let Some(n) = placeholder_at(&template[at..]) {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_string());
            }
        }
    }
    names
}
