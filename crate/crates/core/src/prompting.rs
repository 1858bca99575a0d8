//! Prompt rendering.
//!
//! A prompt has three sections in fixed order: the task introduction
//! (with the output-schema instructions), the scenario context as a list
//! of `{index: N, transcript: "..."}` entries, and the target checklist
//! item. Context entries are one per line so the section can be parsed
//! back positionally regardless of what the utterance text contains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextSelection;
use crate::corpus::ChecklistItem;

pub const TASK_HEADER: &str = "Task Introduction:";
pub const CONTEXT_HEADER: &str = "Scenario Context:";
pub const ITEM_HEADER: &str = "Target Checklist Item:";

/// Output-schema instructions appended to every task introduction. Each
/// output key is named exactly once.
pub const SCHEMA_INSTRUCTIONS: &str = "Return a JSON object with the following keys:\n\
is_completed: true or false\n\
index: if the item was addressed, the number of the transcript entry where adherence first appears\n\
evidence: a direct quote from the transcript as justification";

const PURPOSE_SLOT: &str = "{purpose}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template for scenario {0} has no {{purpose}} slot")]
    TemplateSlotMissing(String),
    #[error("no template for scenario {0}")]
    UnknownScenario(String),
    #[error("context for item {0} is empty")]
    ContextEmpty(String),
    #[error("selection is for item {selection} but item is {item}")]
    ItemMismatch { selection: String, item: String },
    #[error("template text must not contain section header {0:?}")]
    ReservedHeader(&'static str),
    #[error("cannot read template fixture {path}: {detail}")]
    Fixture { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub scenario_id: String,
    /// Introduction text containing a `{purpose}` slot.
    pub task_intro: String,
    /// Phrase substituted for `{purpose}`.
    pub purpose: String,
    #[serde(default = "default_schema")]
    pub schema_instructions: String,
}

fn default_schema() -> String {
    SCHEMA_INSTRUCTIONS.to_string()
}

impl PromptTemplate {
    pub fn new(
        scenario_id: impl Into<String>,
        task_intro: impl Into<String>,
        purpose: impl Into<String>,
    ) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            task_intro: task_intro.into(),
            purpose: purpose.into(),
            schema_instructions: default_schema(),
        }
    }

    fn validate(&self) -> Result<(), PromptError> {
        if !self.task_intro.contains(PURPOSE_SLOT) {
            return Err(PromptError::TemplateSlotMissing(self.scenario_id.clone()));
        }
        for text in [&self.task_intro, &self.purpose, &self.schema_instructions] {
            for header in [TASK_HEADER, CONTEXT_HEADER, ITEM_HEADER] {
                if text.contains(header) {
                    return Err(PromptError::ReservedHeader(header));
                }
            }
        }
        Ok(())
    }

    pub fn introduction(&self) -> Result<String, PromptError> {
        self.validate()?;
        Ok(self.task_intro.replace(PURPOSE_SLOT, &self.purpose))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    task_intro: String,
    #[serde(default)]
    schema_instructions: Option<String>,
    scenarios: Vec<FixtureScenario>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureScenario {
    scenario_id: String,
    purpose: String,
    #[serde(default)]
    task_intro: Option<String>,
}

/// Per-scenario templates loaded from a JSON fixture.
///
/// ```json
/// {
///   "task_intro": "You are ... {purpose}. ...",
///   "scenarios": [{"scenario_id": "collision", "purpose": "avoid ..."}]
/// }
/// ```
///
/// A scenario may override `task_intro`; `schema_instructions` defaults to
/// [`SCHEMA_INSTRUCTIONS`].
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let fixture_err = |detail: String| PromptError::Fixture {
            path: path.display().to_string(),
            detail,
        };
        let body = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        Self::parse(&body).map_err(|e| match e {
            PromptError::Fixture { detail, .. } => fixture_err(detail),
            other => other,
        })
    }

    pub fn parse(body: &str) -> Result<Self, PromptError> {
        let file: FixtureFile = serde_json::from_str(body).map_err(|e| PromptError::Fixture {
            path: String::new(),
            detail: e.to_string(),
        })?;
        let schema = file.schema_instructions.unwrap_or_else(default_schema);
        let mut templates = BTreeMap::new();
        for sc in file.scenarios {
            let t = PromptTemplate {
                scenario_id: sc.scenario_id.clone(),
                task_intro: sc.task_intro.unwrap_or_else(|| file.task_intro.clone()),
                purpose: sc.purpose,
                schema_instructions: schema.clone(),
            };
            t.validate()?;
            templates.insert(sc.scenario_id, t);
        }
        Ok(Self { templates })
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.scenario_id.clone(), template);
    }

    pub fn get(&self, scenario_id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(scenario_id)
            .ok_or_else(|| PromptError::UnknownScenario(scenario_id.to_string()))
    }

    pub fn scenario_ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub source_index: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub session_id: String,
    pub item_id: String,
    pub rendered_text: String,
    pub context_digest: Vec<DigestEntry>,
    pub token_estimate: usize,
}

/// Upper-bound token estimate: ceil(chars / 4).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn context_line(entry: &DigestEntry) -> String {
    format!("{{index: {}, transcript: \"{}\"}}", entry.source_index, entry.text)
}

pub fn render_prompt(
    session_id: &str,
    selection: &ContextSelection,
    item: &ChecklistItem,
    template: &PromptTemplate,
) -> Result<PromptBundle, PromptError> {
    if selection.item_id != item.item_id {
        return Err(PromptError::ItemMismatch {
            selection: selection.item_id.clone(),
            item: item.item_id.clone(),
        });
    }
    if selection.selected.is_empty() {
        return Err(PromptError::ContextEmpty(item.item_id.clone()));
    }
    let intro = template.introduction()?;
    let digest: Vec<DigestEntry> = selection
        .selected
        .iter()
        .map(|u| DigestEntry {
            source_index: u.source_index,
            text: u.text.clone(),
        })
        .collect();

    let mut out = String::new();
    out.push_str(TASK_HEADER);
    out.push('\n');
    out.push_str(intro.trim_end());
    out.push('\n');
    out.push_str(&template.schema_instructions);
    out.push_str("\n\n");
    out.push_str(CONTEXT_HEADER);
    out.push('\n');
    let last = digest.len() - 1;
    for (i, entry) in digest.iter().enumerate() {
        if i == 0 {
            out.push('[');
        }
        out.push_str(&context_line(entry));
        out.push_str(if i == last { "]\n" } else { ",\n" });
    }
    out.push('\n');
    out.push_str(ITEM_HEADER);
    out.push('\n');
    out.push_str(&item.text);
    out.push('\n');

    Ok(PromptBundle {
        session_id: session_id.to_string(),
        item_id: item.item_id.clone(),
        token_estimate: estimate_tokens(&out),
        rendered_text: out,
        context_digest: digest,
    })
}

/// Text sent on a re-ask: the original prompt followed by the schema
/// instructions once more.
pub fn reask_text(bundle: &PromptBundle, template: &PromptTemplate) -> String {
    format!("{}\n{}\n", bundle.rendered_text, template.schema_instructions)
}

/// Recovers the scenario context entries from a rendered prompt.
pub fn parse_scenario_context(rendered: &str) -> Option<Vec<DigestEntry>> {
    let start = rendered.find(&format!("\n\n{CONTEXT_HEADER}\n"))? + CONTEXT_HEADER.len() + 3;
    let mut entries = Vec::new();
    for (i, line) in rendered[start..].split('\n').enumerate() {
        let line = if i == 0 { line.strip_prefix('[')? } else { line };
        let (body, done) = if let Some(b) = line.strip_suffix("\"}]") {
            (b, true)
        } else {
            (line.strip_suffix("\"},")?, false)
        };
        let rest = body.strip_prefix("{index: ")?;
        let (num, text) = rest.split_once(", transcript: \"")?;
        entries.push(DigestEntry {
            source_index: num.parse().ok()?,
            text: text.to_string(),
        });
        if done {
            return Some(entries);
        }
    }
    None
}
