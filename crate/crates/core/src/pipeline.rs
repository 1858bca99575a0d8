//! End-to-end judging of every evaluation item in a set of sessions.
//!
//! Per item: select context, short-circuit on an empty context, render the
//! prompt, call the backend, parse (strict, then repair), and re-ask once
//! on rejection. Items run on a worker pool sized by the backend's
//! `max_in_flight`; finished records are handed to a single sink on the
//! calling thread.

use std::collections::{BTreeSet, VecDeque};
use std::sync::{mpsc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::context::{select_context_with_mode, ContextConfig, ContextMode, EmbeddingProvider};
use crate::corpus::{ChecklistItem, Session};
use crate::llm_client::Backend;
use crate::prompting::{reask_text, render_prompt, TemplateSet};
use crate::schema_parse::{interpret, Grounding, RejectReason, RepairStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    /// A judgment was parsed from the backend output.
    Judged,
    /// Context selection came back empty; scored as not completed.
    NoContext,
    /// Output was rejected on the first call and on the re-ask.
    Unparseable,
    /// The backend or embedding provider failed.
    Error,
}

impl ItemStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, Self::Unparseable | Self::Error)
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    /// Injected event the item belongs to; reports group by it.
    pub scenario_id: String,
    pub item_id: String,
    pub priority: u8,
    pub model: String,
    pub condition: ContextMode,
    pub status: ItemStatus,
    pub is_completed: Option<bool>,
    pub index: Option<u64>,
    pub evidence: Option<String>,
    pub grounded: Grounding,
    pub repair_applied: Vec<RepairStep>,
    /// Whether the first completion passed strict parsing; absent when the
    /// backend was not called.
    pub strict_parse: Option<bool>,
    pub reasked: bool,
    pub fallback_used: bool,
    pub context_size: usize,
    pub context_indices: Vec<u64>,
    pub rejection: Option<RejectReason>,
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn key(&self) -> (String, String) {
        (self.session_id.clone(), self.item_id.clone())
    }
}

pub struct PipelineOptions<'a> {
    pub context: &'a ContextConfig,
    pub mode: ContextMode,
    pub templates: &'a TemplateSet,
    pub embedder: &'a dyn EmbeddingProvider,
    pub fuzzy_threshold: f64,
    pub workers: usize,
}

fn base_record(session: &Session, item: &ChecklistItem, model: &str, mode: ContextMode) -> PredictionRecord {
    PredictionRecord {
        session_id: session.session_id.clone(),
        scenario_id: item.event_id.clone(),
        item_id: item.item_id.clone(),
        priority: item.priority,
        model: model.to_string(),
        condition: mode,
        status: ItemStatus::Error,
        is_completed: None,
        index: None,
        evidence: None,
        grounded: Grounding::NotApplicable,
        repair_applied: Vec::new(),
        strict_parse: None,
        reasked: false,
        fallback_used: false,
        context_size: 0,
        context_indices: Vec::new(),
        rejection: None,
        error: None,
    }
}

pub fn judge_item(
    session: &Session,
    item: &ChecklistItem,
    opts: &PipelineOptions<'_>,
    backend: &dyn Backend,
) -> PredictionRecord {
    let mut rec = base_record(session, item, &backend.label(), opts.mode);

    let selection = match select_context_with_mode(session, item, opts.context, opts.embedder, opts.mode) {
        Ok(s) => s,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.fallback_used = selection.fallback_used;
    rec.context_size = selection.selected.len();
    rec.context_indices = selection.selected.iter().map(|u| u.source_index).collect();
    if selection.selected.is_empty() {
        rec.status = ItemStatus::NoContext;
        rec.is_completed = Some(false);
        return rec;
    }

    let template = match opts.templates.get(&item.event_id) {
        Ok(t) => t,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let bundle = match render_prompt(&session.session_id, &selection, item, template) {
        Ok(b) => b,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };

    let first = match backend.complete(&bundle) {
        Ok(r) => r,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let (outcome, strict) = interpret(&first, &bundle.context_digest, opts.fuzzy_threshold);
    rec.strict_parse = Some(strict);
    let outcome = match outcome {
        Ok(j) => Ok(j),
        Err(_) => {
            rec.reasked = true;
            let text = reask_text(&bundle, template);
            match backend.complete_text(&bundle.session_id, &bundle.item_id, &text) {
                Ok(second) => interpret(&second, &bundle.context_digest, opts.fuzzy_threshold).0,
                Err(e) => {
                    rec.error = Some(e.to_string());
                    return rec;
                }
            }
        }
    };
    match outcome {
        Ok(j) => {
            rec.status = ItemStatus::Judged;
            rec.is_completed = Some(j.is_completed);
            rec.index = j.index;
            rec.evidence = j.evidence;
            rec.grounded = j.grounded;
            rec.repair_applied = j.repair_applied;
        }
        Err(rej) => {
            rec.status = ItemStatus::Unparseable;
            rec.rejection = Some(rej.reason);
            rec.error = Some(rej.detail);
        }
    }
    rec
}

/// Judges every evaluation item not in `skip`, calling `sink` for each
/// finished record in completion order. Returns all new records sorted by
/// `(session_id, item_id)`.
pub fn run_pipeline(
    sessions: &[Session],
    opts: &PipelineOptions<'_>,
    backend: &dyn Backend,
    skip: &BTreeSet<(String, String)>,
    mut sink: impl FnMut(&PredictionRecord),
) -> Vec<PredictionRecord> {
    let queue: VecDeque<(&Session, &ChecklistItem)> = sessions
        .iter()
        .flat_map(|s| s.evaluation_items().map(move |i| (s, i)))
        .filter(|(s, i)| !skip.contains(&(s.session_id.clone(), i.item_id.clone())))
        .collect();
    let workers = opts.workers.clamp(1, queue.len().max(1));
    let queue = Mutex::new(queue);
    let (tx, rx) = mpsc::channel();
    let mut out = Vec::new();

    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((session, item)) = next else { break };
                if tx.send(judge_item(session, item, opts, backend)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for rec in rx {
            sink(&rec);
            out.push(rec);
        }
    });

    out.sort_by(|a, b| (&a.session_id, &a.item_id).cmp(&(&b.session_id, &b.item_id)));
    out
}
