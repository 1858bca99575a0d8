use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{Backend, BackendError, HealthReport, RawCompletion};

/// Returned for keys missing from a script without a `"*"` entry.
pub const DEFAULT_MOCK_TEXT: &str = "I cannot determine compliance.";

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptValue {
    One(String),
    Many(Vec<String>),
}

/// Canned completions keyed by `session_id/item_id`.
///
/// A value is either one string or a list; a list is replayed in call
/// order for that key and its last entry repeats. The key `"*"` sets the
/// fallback text for every other key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockScript {
    entries: BTreeMap<String, Vec<String>>,
    default: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entry(mut self, session_id: &str, item_id: &str, text: impl Into<String>) -> Self {
        self.entries.insert(key(session_id, item_id), vec![text.into()]);
        self
    }

    pub fn with_sequence(mut self, session_id: &str, item_id: &str, texts: Vec<String>) -> Self {
        assert!(!texts.is_empty(), "sequence needs at least one entry");
        self.entries.insert(key(session_id, item_id), texts);
        self
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    pub fn parse(body: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, ScriptValue> =
            serde_json::from_str(body).map_err(|e| e.to_string())?;
        let mut script = Self::new();
        for (k, v) in raw {
            let texts = match v {
                ScriptValue::One(s) => vec![s],
                ScriptValue::Many(v) if v.is_empty() => {
                    return Err(format!("script entry {k:?} is an empty list"))
                }
                ScriptValue::Many(v) => v,
            };
            if k == "*" {
                script.default = texts.into_iter().next();
            } else {
                script.entries.insert(k, texts);
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let body = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&body).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Text for the `call`-th request (0-based) on this key. Total.
    pub fn lookup(&self, session_id: &str, item_id: &str, call: usize) -> &str {
        match self.entries.get(&key(session_id, item_id)) {
            Some(texts) => &texts[call.min(texts.len() - 1)],
            None => self.default.as_deref().unwrap_or(DEFAULT_MOCK_TEXT),
        }
    }
}

fn key(session_id: &str, item_id: &str) -> String {
    format!("{session_id}/{item_id}")
}

pub struct MockBackend {
    script: MockScript,
    calls: Mutex<HashMap<String, usize>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: Mutex::new(HashMap::new()),
        }
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().expect("calls lock").values().sum()
    }
}

impl Backend for MockBackend {
    fn label(&self) -> String {
        "mock".into()
    }

    fn complete_text(
        &self,
        session_id: &str,
        item_id: &str,
        _prompt: &str,
    ) -> Result<RawCompletion, BackendError> {
        let call = {
            let mut calls = self.calls.lock().expect("calls lock");
            let n = calls.entry(key(session_id, item_id)).or_insert(0);
            *n += 1;
            *n - 1
        };
        Ok(RawCompletion {
            item_id: item_id.to_string(),
            text: self.script.lookup(session_id, item_id, call).to_string(),
            latency_ms: 0,
            attempt: 1,
        })
    }

    fn healthcheck(&self) -> HealthReport {
        HealthReport::ok(vec!["mock".into()])
    }
}
