//! Versioned template file: one entry per task, each turn's text carrying
//! named `{placeholder}` slots, plus the default system prompt.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversation::{Role, TaskId};
use crate::error::{Error, Result};

/// Canonical template file compiled into the library. A config may point at
/// an edited copy instead; the manifest records the hash of whichever is used.
pub const DEFAULT_TEMPLATES: &str = include_str!("../../templates/default.toml");

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    version: u32,
    system_prompt: String,
    #[serde(rename = "template")]
    templates: Vec<TemplateEntry>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    task: TaskId,
    turns: Vec<TurnEntry>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TurnEntry {
    role: Role,
    text: String,
    #[serde(default)]
    target: bool,
}

/// One turn of a task template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateTurn {
    pub role: Role,
    pub text: String,
    pub target: bool,
}

/// All task templates plus the system prompt, hashed as a unit.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub version: u32,
    pub system_prompt: String,
    turns: BTreeMap<TaskId, Vec<TemplateTurn>>,
    raw: String,
}

impl TemplateSet {
    pub fn embedded_default() -> TemplateSet {
        Self::parse(DEFAULT_TEMPLATES, "<embedded templates>")
            .expect("embedded template file is valid")
    }

    pub fn load(path: &Path) -> Result<TemplateSet> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw, &path.display().to_string())
    }

    pub fn parse(raw: &str, origin: &str) -> Result<TemplateSet> {
        let file: TemplateFile = toml::from_str(raw)
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let mut turns = BTreeMap::new();
        for entry in file.templates {
            if turns.contains_key(&entry.task) {
                return Err(Error::Config(format!(
                    "{origin}: duplicate template for task `{}`",
                    entry.task.as_str()
                )));
            }
            validate_turns(&entry, origin)?;
            let compiled = entry
                .turns
                .into_iter()
                .map(|t| TemplateTurn {
                    role: t.role,
                    text: t.text,
                    target: t.target,
                })
                .collect();
            turns.insert(entry.task, compiled);
        }
        for task in TaskId::all() {
            if !turns.contains_key(task) {
                return Err(Error::Config(format!(
                    "{origin}: missing template for task `{}`",
                    task.as_str()
                )));
            }
        }
        Ok(TemplateSet {
            version: file.version,
            system_prompt: file.system_prompt,
            turns,
            raw: raw.to_string(),
        })
    }

    pub fn turns(&self, task: TaskId) -> &[TemplateTurn] {
        &self.turns[&task]
    }

    /// Bytes the template hash is computed over.
    pub fn raw_bytes(&self) -> &[u8] {
        self.raw.as_bytes()
    }
}

fn validate_turns(entry: &TemplateEntry, origin: &str) -> Result<()> {
    let task = entry.task.as_str();
    if entry.turns.is_empty() {
        return Err(Error::Config(format!("{origin}: task `{task}` has no turns")));
    }
    let mut has_target = false;
    for (i, turn) in entry.turns.iter().enumerate() {
        match turn.role {
            Role::System => {
                return Err(Error::Config(format!(
                    "{origin}: task `{task}` declares a system turn; the system \
                     prompt is inserted automatically"
                )));
            }
            Role::Assistant => {
                if i == 0 || entry.turns[i - 1].role != Role::User {
                    return Err(Error::Config(format!(
                        "{origin}: task `{task}` has an assistant turn not following a user turn"
                    )));
                }
                has_target |= turn.target;
            }
            Role::User => {
                if turn.target {
                    return Err(Error::Config(format!(
                        "{origin}: task `{task}` marks a user turn as target"
                    )));
                }
            }
        }
    }
    if !has_target {
        return Err(Error::Config(format!(
            "{origin}: task `{task}` has no target turn"
        )));
    }
    Ok(())
}

/// Substitutes `{name}` slots in a template turn. Every placeholder in the
/// text must have a value.
pub fn render_text(
    task: &str,
    template: &str,
    values: &BTreeMap<&str, String>,
) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 32);
    for piece in split_template(template) {
        match piece {
            Piece::Literal(lit) => out.push_str(lit),
            Piece::Placeholder(name) => match values.get(name) {
                Some(value) => out.push_str(value),
                None => {
                    return Err(Error::MissingPlaceholder {
                        task: task.to_string(),
                        placeholder: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

/// Inverse of [`render_text`]: recovers placeholder values from rendered
/// text, or None when the literal segments do not match.
pub fn extract_text(template: &str, rendered: &str) -> Option<BTreeMap<String, String>> {
    let pieces: Vec<Piece> = split_template(template).collect();
    let mut values = BTreeMap::new();
    let mut pos = 0usize;
    let mut i = 0usize;
    while i < pieces.len() {
        match &pieces[i] {
            Piece::Literal(lit) => {
                if !rendered[pos..].starts_with(lit) {
                    return None;
                }
                pos += lit.len();
                i += 1;
            }
            Piece::Placeholder(name) => {
                let end = match pieces.get(i + 1) {
                    Some(Piece::Literal(next)) => pos + rendered[pos..].find(next)?,
                    Some(Piece::Placeholder(_)) => return None, // ambiguous
                    None => rendered.len(),
                };
                values.insert(name.to_string(), rendered[pos..end].to_string());
                pos = end;
                i += 1;
            }
        }
    }
    if pos == rendered.len() {
        Some(values)
    } else {
        None
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn split_template(template: &str) -> impl Iterator<Item = Piece<'_>> {
    let mut rest = template;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        if let Some(stripped) = rest.strip_prefix('{') {
            if let Some(end) = stripped.find('}') {
                let name = &stripped[..end];
                rest = &stripped[end + 1..];
                return Some(Piece::Placeholder(name));
            }
        }
        let end = rest[1..].find('{').map(|p| p + 1).unwrap_or(rest.len());
        let lit = &rest[..end];
        rest = &rest[end..];
        Some(Piece::Literal(lit))
    })
}
