//! Session data model: transcripts, checklists, event schedules and
//! ground-truth labels, plus the loaders that validate them.
//!
//! On-disk layout:
//!
//! * `transcript.jsonl` holds one utterance per line with keys exactly
//!   `index`, `timestamp_s`, `speaker`, `text`.
//! * `checklist.json` holds `scenario_id` and an `items` array.
//! * `session.json` is the manifest. It points at the transcript and
//!   checklist (paths relative to the manifest) and carries the events
//!   inline, along with the visibility and an optional `ground_truth` map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed transcript line {line_no}: {detail}")]
    MalformedLine { line_no: usize, detail: String },
    #[error("timestamp decreases at utterance {0}")]
    NonMonotonicTimestamp(usize),
    #[error("utterance index out of order at line {line_no}")]
    IndexOutOfOrder { line_no: usize },
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("malformed document {path}: {detail}")]
    MalformedDocument { path: PathBuf, detail: String },
    #[error("duplicate checklist item id {0}")]
    DuplicateItemId(String),
    #[error("priority of item {0} is outside 1..=4")]
    PriorityOutOfRange(String),
    #[error("unknown visibility {0:?}")]
    UnknownVisibility(String),
    #[error("checklist item text is empty for {0}")]
    EmptyItemText(String),
    #[error("checklist has no items")]
    EmptyChecklist,
    #[error("event {event_id} has an invalid window [{start_s}, {end_s}]")]
    InvalidEventWindow {
        event_id: String,
        start_s: f64,
        end_s: f64,
    },
    #[error("duplicate event id {0}")]
    DuplicateEventId(String),
    #[error("item {0} references an event that does not exist")]
    DanglingEventRef(String),
    #[error("ground truth names unknown item {0}")]
    UnknownGroundTruthKey(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Participant,
    InstructorRoleplay,
    Other,
}

/// One transcribed speech turn.
///
/// `ordinal` is the dense position inside the transcript; `source_index`
/// is the index as it appeared in the input file and is what evidence
/// citations refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub ordinal: usize,
    pub source_index: u64,
    pub timestamp_s: f64,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub session_id: String,
    utterances: Vec<Utterance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    index: u64,
    timestamp_s: f64,
    speaker: Speaker,
    text: String,
}

#[derive(Serialize)]
struct UtteranceLineOut<'a> {
    index: u64,
    timestamp_s: f64,
    speaker: Speaker,
    text: &'a str,
}

/// Collapses CR/LF into single spaces. Utterance text is single-line so the
/// rendered prompt can be parsed back positionally.
fn single_line(text: &str) -> String {
    if !text.contains(['\n', '\r']) {
        return text.to_string();
    }
    text.replace("\r\n", " ").replace(['\r', '\n'], " ")
}

impl Transcript {
    /// Builds a transcript from `(source_index, timestamp_s, speaker, text)`
    /// tuples, assigning dense ordinals. Validation matches the file loader.
    pub fn new(
        session_id: impl Into<String>,
        raw: impl IntoIterator<Item = (u64, f64, Speaker, String)>,
    ) -> Result<Self> {
        let mut utterances: Vec<Utterance> = Vec::new();
        for (line_no, (source_index, timestamp_s, speaker, text)) in raw.into_iter().enumerate() {
            let line_no = line_no + 1;
            push_checked(&mut utterances, line_no, source_index, timestamp_s, speaker, text)?;
        }
        if utterances.is_empty() {
            return Err(CorpusError::EmptyTranscript);
        }
        Ok(Self {
            session_id: session_id.into(),
            utterances,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let line = UtteranceLineOut {
                index: u.source_index,
                timestamp_s: u.timestamp_s,
                speaker: u.speaker,
                text: &u.text,
            };
            out.push_str(&serde_json::to_string(&line).expect("utterance serializes"));
            out.push('\n');
        }
        out
    }
}

fn push_checked(
    utterances: &mut Vec<Utterance>,
    line_no: usize,
    source_index: u64,
    timestamp_s: f64,
    speaker: Speaker,
    text: String,
) -> Result<()> {
    if !timestamp_s.is_finite() || timestamp_s < 0.0 {
        return Err(CorpusError::MalformedLine {
            line_no,
            detail: format!("timestamp_s must be a non-negative number, got {timestamp_s}"),
        });
    }
    let text = single_line(&text);
    if text.trim().is_empty() {
        return Err(CorpusError::MalformedLine {
            line_no,
            detail: "text is empty".into(),
        });
    }
    let ordinal = utterances.len();
    if let Some(prev) = utterances.last() {
        if source_index <= prev.source_index {
            return Err(CorpusError::IndexOutOfOrder { line_no });
        }
        if timestamp_s < prev.timestamp_s {
            return Err(CorpusError::NonMonotonicTimestamp(ordinal));
        }
    }
    utterances.push(Utterance {
        ordinal,
        source_index,
        timestamp_s,
        speaker,
        text,
    });
    Ok(())
}

/// Loads a line-delimited JSON transcript. Blank lines are skipped; sparse
/// indices are kept as `source_index` and re-densified into ordinals.
pub fn load_transcript(path: &Path) -> Result<Transcript> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let session_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_transcript(BufReader::new(file), session_id)
}

pub fn parse_transcript(reader: impl BufRead, session_id: impl Into<String>) -> Result<Transcript> {
    let mut utterances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::MalformedLine {
            line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        // serde would also accept the positional array form
        if !line.trim_start().starts_with('{') {
            return Err(CorpusError::MalformedLine {
                line_no,
                detail: "expected a JSON object".into(),
            });
        }
        let parsed: UtteranceLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line_no,
                detail: e.to_string(),
            })?;
        push_checked(
            &mut utterances,
            line_no,
            parsed.index,
            parsed.timestamp_s,
            parsed.speaker,
            parsed.text,
        )?;
    }
    if utterances.is_empty() {
        return Err(CorpusError::EmptyTranscript);
    }
    Ok(Transcript {
        session_id: session_id.into(),
        utterances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Daytime,
    Nighttime,
}

impl Visibility {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "daytime" => Ok(Self::Daytime),
            "nighttime" => Ok(Self::Nighttime),
            other => Err(CorpusError::UnknownVisibility(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Daytime => "daytime",
            Self::Nighttime => "nighttime",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityCondition {
    Any,
    Daytime,
    Nighttime,
}

impl VisibilityCondition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Self::Any),
            "daytime" => Ok(Self::Daytime),
            "nighttime" => Ok(Self::Nighttime),
            other => Err(CorpusError::UnknownVisibility(other.to_string())),
        }
    }

    pub fn admits(self, visibility: Visibility) -> bool {
        match self {
            Self::Any => true,
            Self::Daytime => visibility == Visibility::Daytime,
            Self::Nighttime => visibility == Visibility::Nighttime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub item_id: String,
    pub event_id: String,
    pub text: String,
    pub priority: u8,
    pub visibility_condition: VisibilityCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checklist {
    pub scenario_id: String,
    pub items: Vec<ChecklistItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChecklist {
    scenario_id: String,
    items: Vec<RawChecklistItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChecklistItem {
    item_id: String,
    event_id: String,
    text: String,
    priority: i64,
    #[serde(default)]
    visibility_condition: Option<String>,
}

impl Checklist {
    pub fn new(scenario_id: impl Into<String>, items: Vec<ChecklistItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(CorpusError::EmptyChecklist);
        }
        let mut seen = BTreeSet::new();
        for item in &items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(CorpusError::DuplicateItemId(item.item_id.clone()));
            }
            if !(1..=4).contains(&item.priority) {
                return Err(CorpusError::PriorityOutOfRange(item.item_id.clone()));
            }
            if item.text.trim().is_empty() {
                return Err(CorpusError::EmptyItemText(item.item_id.clone()));
            }
        }
        Ok(Self {
            scenario_id: scenario_id.into(),
            items,
        })
    }

    pub fn item(&self, item_id: &str) -> Option<&ChecklistItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

pub fn load_checklist(path: &Path) -> Result<Checklist> {
    let body = read_to_string(path)?;
    parse_checklist(&body).map_err(|e| match e {
        CorpusError::MalformedDocument { detail, .. } => CorpusError::MalformedDocument {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

pub fn parse_checklist(body: &str) -> Result<Checklist> {
    let raw: RawChecklist =
        serde_json::from_str(body).map_err(|e| CorpusError::MalformedDocument {
            path: PathBuf::new(),
            detail: e.to_string(),
        })?;
    let mut items = Vec::with_capacity(raw.items.len());
    for it in raw.items {
        let visibility_condition = match it.visibility_condition.as_deref() {
            None => VisibilityCondition::Any,
            Some(s) => VisibilityCondition::parse(s)?,
        };
        let priority = u8::try_from(it.priority)
            .ok()
            .filter(|p| (1..=4).contains(p))
            .ok_or_else(|| CorpusError::PriorityOutOfRange(it.item_id.clone()))?;
        items.push(ChecklistItem {
            item_id: it.item_id,
            event_id: it.event_id,
            text: it.text,
            priority,
            visibility_condition,
        });
    }
    Checklist::new(raw.scenario_id, items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub event_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl EventWindow {
    pub fn new(event_id: impl Into<String>, start_s: f64, end_s: f64) -> Result<Self> {
        let event_id = event_id.into();
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || start_s >= end_s {
            return Err(CorpusError::InvalidEventWindow {
                event_id,
                start_s,
                end_s,
            });
        }
        Ok(Self {
            event_id,
            start_s,
            end_s,
        })
    }
}

/// A fully cross-checked session. Immutable after assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub transcript: Transcript,
    pub checklist: Checklist,
    pub events: Vec<EventWindow>,
    pub visibility: Visibility,
    pub ground_truth: Option<BTreeMap<String, bool>>,
    evaluation_items: Vec<usize>,
}

pub fn assemble_session(
    transcript: Transcript,
    checklist: Checklist,
    events: Vec<EventWindow>,
    visibility: Visibility,
    ground_truth: Option<BTreeMap<String, bool>>,
) -> Result<Session> {
    let mut event_ids = BTreeSet::new();
    for ev in &events {
        // re-run window validation in case the struct was built by hand
        EventWindow::new(ev.event_id.clone(), ev.start_s, ev.end_s)?;
        if !event_ids.insert(ev.event_id.as_str()) {
            return Err(CorpusError::DuplicateEventId(ev.event_id.clone()));
        }
    }
    for item in &checklist.items {
        if !event_ids.contains(item.event_id.as_str()) {
            return Err(CorpusError::DanglingEventRef(item.item_id.clone()));
        }
    }
    if let Some(gt) = &ground_truth {
        for key in gt.keys() {
            if checklist.item(key).is_none() {
                return Err(CorpusError::UnknownGroundTruthKey(key.clone()));
            }
        }
    }
    let evaluation_items = checklist
        .items
        .iter()
        .enumerate()
        .filter(|(_, item)| item.visibility_condition.admits(visibility))
        .map(|(i, _)| i)
        .collect();
    Ok(Session {
        session_id: transcript.session_id.clone(),
        transcript,
        checklist,
        events,
        visibility,
        ground_truth,
        evaluation_items,
    })
}

impl Session {
    /// Checklist items that apply under this session's visibility, in
    /// checklist order.
    pub fn evaluation_items(&self) -> impl Iterator<Item = &ChecklistItem> {
        self.evaluation_items.iter().map(|&i| &self.checklist.items[i])
    }

    pub fn evaluation_len(&self) -> usize {
        self.evaluation_items.len()
    }

    pub fn event(&self, event_id: &str) -> Option<&EventWindow> {
        self.events.iter().find(|e| e.event_id == event_id)
    }

    pub fn truth(&self, item_id: &str) -> Option<bool> {
        self.ground_truth.as_ref()?.get(item_id).copied()
    }

    /// Writes `transcript.jsonl`, `checklist.json` and `session.json` into
    /// `dir`, returning the manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CorpusError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let transcript_path = dir.join("transcript.jsonl");
        fs::write(&transcript_path, self.transcript.to_jsonl()).map_err(io(&transcript_path))?;
        let checklist_path = dir.join("checklist.json");
        let checklist_json =
            serde_json::to_string_pretty(&self.checklist).expect("checklist serializes");
        fs::write(&checklist_path, checklist_json + "\n").map_err(io(&checklist_path))?;
        let manifest = SessionManifest {
            session_id: self.session_id.clone(),
            transcript: "transcript.jsonl".into(),
            checklist: "checklist.json".into(),
            events: self.events.clone(),
            visibility: self.visibility.as_str().into(),
            ground_truth: self.ground_truth.clone(),
        };
        let manifest_path = dir.join("session.json");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, body + "\n").map_err(io(&manifest_path))?;
        Ok(manifest_path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionManifest {
    session_id: String,
    transcript: PathBuf,
    checklist: PathBuf,
    events: Vec<EventWindow>,
    visibility: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<BTreeMap<String, bool>>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a `session.json` manifest together with the files it references.
pub fn load_session(manifest_path: &Path) -> Result<Session> {
    let body = read_to_string(manifest_path)?;
    let manifest: SessionManifest =
        serde_json::from_str(&body).map_err(|e| CorpusError::MalformedDocument {
            path: manifest_path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut transcript = load_transcript(&base.join(&manifest.transcript))?;
    transcript.session_id = manifest.session_id.clone();
    let checklist = load_checklist(&base.join(&manifest.checklist))?;
    let visibility = Visibility::parse(&manifest.visibility)?;
    let events = manifest
        .events
        .into_iter()
        .map(|e| EventWindow::new(e.event_id, e.start_s, e.end_s))
        .collect::<Result<Vec<_>>>()?;
    assemble_session(transcript, checklist, events, visibility, manifest.ground_truth)
}
