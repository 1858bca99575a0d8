//! Schema-constrained interpretation of raw model output.
//!
//! The target schema is a single JSON object:
//! `is_completed` (boolean, required), `index` (integer, optional),
//! `evidence` (string, optional). `null` is treated as absent.
//!
//! [`parse_strict`] accepts only conforming objects. [`repair_and_parse`]
//! runs a fixed repair ladder first and records every step that changed
//! the input.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::llm_client::RawCompletion;
use crate::prompting::DigestEntry;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    Exact,
    Fuzzy,
    Ungrounded,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStep {
    Fences,
    ExtractBalanced,
    KeyAlias,
    BoolCoerce,
    IntCoerce,
    DropUnknown,
    InferCompleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoJsonFound,
    SchemaMismatch,
    TypeError,
    ContradictoryFields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceJudgment {
    pub item_id: String,
    pub is_completed: bool,
    pub index: Option<u64>,
    pub evidence: Option<String>,
    pub repair_applied: Vec<RepairStep>,
    pub grounded: Grounding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRejection {
    pub item_id: String,
    pub reason: RejectReason,
    pub detail: String,
    pub raw_text: String,
}

pub type ParseOutcome = Result<ComplianceJudgment, ParseRejection>;

const KEYS: [&str; 3] = ["is_completed", "index", "evidence"];

struct Fields {
    is_completed: bool,
    index: Option<u64>,
    evidence: Option<String>,
}

fn reject(raw: &RawCompletion, reason: RejectReason, detail: impl Into<String>) -> ParseRejection {
    ParseRejection {
        item_id: raw.item_id.clone(),
        reason,
        detail: detail.into(),
        raw_text: raw.text.clone(),
    }
}

/// Validates a decoded object against the schema and the cross-field rules.
fn validate_object(
    obj: &Map<String, Value>,
    digest: &[DigestEntry],
) -> Result<Fields, (RejectReason, String)> {
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err((RejectReason::SchemaMismatch, format!("unknown key {k:?}")));
    }
    let is_completed = match obj.get("is_completed") {
        None | Some(Value::Null) => {
            return Err((RejectReason::SchemaMismatch, "missing is_completed".into()))
        }
        Some(Value::Bool(b)) => *b,
        Some(other) => {
            return Err((RejectReason::TypeError, format!("is_completed is {other}")))
        }
    };
    let index = match obj.get("index") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => match n.as_u64() {
            Some(i) => Some(i),
            None => return Err((RejectReason::TypeError, format!("index is {n}"))),
        },
        Some(other) => return Err((RejectReason::TypeError, format!("index is {other}"))),
    };
    let evidence = match obj.get("evidence") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err((RejectReason::TypeError, format!("evidence is {other}"))),
    };
    if is_completed && evidence.is_none() {
        return Err((
            RejectReason::ContradictoryFields,
            "is_completed is true but no evidence given".into(),
        ));
    }
    if let Some(i) = index {
        if !digest.iter().any(|d| d.source_index == i) {
            return Err((
                RejectReason::ContradictoryFields,
                format!("index {i} is not in the prompt context"),
            ));
        }
    }
    Ok(Fields {
        is_completed,
        index,
        evidence,
    })
}

fn judgment(
    item_id: &str,
    f: Fields,
    steps: Vec<RepairStep>,
    digest: &[DigestEntry],
    fuzzy: f64,
) -> ComplianceJudgment {
    let j = ComplianceJudgment {
        item_id: item_id.to_string(),
        is_completed: f.is_completed,
        index: f.index,
        evidence: f.evidence,
        repair_applied: steps,
        grounded: Grounding::NotApplicable,
    };
    ground_evidence(j, digest, fuzzy)
}

/// Accepts only a single well-formed object that satisfies the schema.
pub fn parse_strict(raw: &RawCompletion, digest: &[DigestEntry]) -> ParseOutcome {
    parse_strict_with(raw, digest, DEFAULT_FUZZY_THRESHOLD)
}

pub fn parse_strict_with(raw: &RawCompletion, digest: &[DigestEntry], fuzzy: f64) -> ParseOutcome {
    let value: Value = serde_json::from_str(&raw.text)
        .map_err(|e| reject(raw, RejectReason::NoJsonFound, e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(reject(raw, RejectReason::SchemaMismatch, "top level is not an object"));
    };
    let fields = validate_object(&obj, digest).map_err(|(r, d)| reject(raw, r, d))?;
    Ok(judgment(&raw.item_id, fields, Vec::new(), digest, fuzzy))
}

/// Strict parse first, falling back to the repair ladder.
pub fn interpret(raw: &RawCompletion, digest: &[DigestEntry], fuzzy: f64) -> (ParseOutcome, bool) {
    match parse_strict_with(raw, digest, fuzzy) {
        Ok(j) => (Ok(j), true),
        Err(_) => (repair_and_parse_with(raw, digest, fuzzy), false),
    }
}

pub fn repair_and_parse(raw: &RawCompletion, digest: &[DigestEntry]) -> ParseOutcome {
    repair_and_parse_with(raw, digest, DEFAULT_FUZZY_THRESHOLD)
}

/// Runs the repair ladder, in order:
/// fences, extract_balanced, key_alias, bool_coerce, int_coerce,
/// drop_unknown, infer_completed; then strict validation.
pub fn repair_and_parse_with(raw: &RawCompletion, digest: &[DigestEntry], fuzzy: f64) -> ParseOutcome {
    let mut steps = Vec::new();

    let mut text = raw.text.trim().to_string();
    if let Some(inner) = strip_fences(&text) {
        text = inner;
        steps.push(RepairStep::Fences);
    }

    let mut value = match serde_json::from_str::<Value>(&text) {
        Ok(v @ Value::Object(_)) => v,
        _ => {
            let Some(region) = first_balanced_object(&text) else {
                return Err(reject(raw, RejectReason::NoJsonFound, "no balanced {...} region"));
            };
            if region.len() != text.len() {
                steps.push(RepairStep::ExtractBalanced);
            }
            match serde_json::from_str::<Value>(region) {
                Ok(v) => v,
                Err(_) => {
                    // Python-style literals are the common near miss.
                    let fixed = fix_bare_literals(region);
                    match serde_json::from_str::<Value>(&fixed) {
                        Ok(v) => {
                            steps.push(RepairStep::BoolCoerce);
                            v
                        }
                        Err(e) => {
                            return Err(reject(raw, RejectReason::NoJsonFound, e.to_string()))
                        }
                    }
                }
            }
        }
    };
    let Value::Object(obj) = &mut value else {
        return Err(reject(raw, RejectReason::SchemaMismatch, "top level is not an object"));
    };

    if alias_keys(obj) {
        steps.push(RepairStep::KeyAlias);
    }
    if coerce_bool(obj) && !steps.contains(&RepairStep::BoolCoerce) {
        steps.push(RepairStep::BoolCoerce);
    }
    if coerce_index(obj) {
        steps.push(RepairStep::IntCoerce);
    }
    let before = obj.len();
    obj.retain(|k, _| KEYS.contains(&k.as_str()));
    if obj.len() != before {
        steps.push(RepairStep::DropUnknown);
    }
    let has_evidence = matches!(obj.get("evidence"), Some(Value::String(s)) if !s.trim().is_empty());
    if has_evidence && matches!(obj.get("is_completed"), None | Some(Value::Null)) {
        obj.insert("is_completed".into(), Value::Bool(true));
        steps.push(RepairStep::InferCompleted);
    }

    let fields = validate_object(obj, digest).map_err(|(r, d)| reject(raw, r, d))?;
    // the literal fix can record bool_coerce before key_alias runs
    steps.sort();
    Ok(judgment(&raw.item_id, fields, steps, digest, fuzzy))
}

/// Returns the body of a markdown code fence if the text contains one.
fn strip_fences(text: &str) -> Option<String> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // skip an info string such as `json`
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let close = body.find("```").unwrap_or(body.len());
    Some(body[..close].trim().to_string())
}

/// First `{...}` region with balanced braces, ignoring braces inside JSON
/// string literals.
fn first_balanced_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find('{') {
        let start = search_from + rel;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..=i]);
                    }
                }
                _ => {}
            }
        }
        search_from = start + 1;
    }
    None
}

/// Rewrites bare `True`/`False`/`None` tokens outside string literals.
fn fix_bare_literals(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        match word.as_str() {
            "True" => out.push_str("true"),
            "False" => out.push_str("false"),
            "None" => out.push_str("null"),
            w => out.push_str(w),
        }
        word.clear();
    };
    for c in text.chars() {
        if in_str {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        if c == '"' {
            in_str = true;
        }
        out.push(c);
    }
    flush(&mut word, &mut out);
    out
}

fn canonical_key(key: &str) -> Option<&'static str> {
    let folded: String = key
        .trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect();
    match folded.as_str() {
        "is_completed" | "completed" | "is_complete" | "iscompleted" => Some("is_completed"),
        "index" | "idx" => Some("index"),
        "evidence" | "quote" => Some("evidence"),
        _ => None,
    }
}

/// Renames case variants and aliases onto the canonical keys. A canonical
/// key already present wins over an alias.
fn alias_keys(obj: &mut Map<String, Value>) -> bool {
    let renames: Vec<(String, &'static str)> = obj
        .keys()
        .filter(|k| !KEYS.contains(&k.as_str()))
        .filter_map(|k| canonical_key(k).map(|c| (k.clone(), c)))
        .collect();
    let mut changed = false;
    let mut claimed: BTreeSet<&str> = obj.keys().filter_map(|k| KEYS.iter().find(|c| **c == k)).copied().collect();
    for (from, to) in renames {
        if claimed.contains(to) {
            continue;
        }
        if let Some(v) = obj.remove(&from) {
            obj.insert(to.to_string(), v);
            claimed.insert(to);
            changed = true;
        }
    }
    changed
}

fn coerce_bool(obj: &mut Map<String, Value>) -> bool {
    let Some(v) = obj.get_mut("is_completed") else {
        return false;
    };
    let coerced = match v {
        Value::String(s) => match s.trim() {
            "True" | "true" | "yes" | "Yes" => Some(true),
            "False" | "false" | "no" | "No" => Some(false),
            _ => None,
        },
        Value::Number(n) => match n.as_i64() {
            Some(1) => Some(true),
            Some(0) => Some(false),
            _ => None,
        },
        _ => None,
    };
    match coerced {
        Some(b) => {
            *v = Value::Bool(b);
            true
        }
        None => false,
    }
}

fn coerce_index(obj: &mut Map<String, Value>) -> bool {
    let Some(v) = obj.get_mut("index") else {
        return false;
    };
    let coerced = match v {
        Value::String(s) => s.trim().parse::<u64>().ok(),
        Value::Number(n) if n.as_u64().is_none() => n
            .as_f64()
            .filter(|f| f.fract() == 0.0 && *f >= 0.0 && *f <= u64::MAX as f64)
            .map(|f| f as u64),
        _ => None,
    };
    match coerced {
        Some(i) => {
            *v = Value::from(i);
            true
        }
        None => false,
    }
}

/// Case-folds, collapses whitespace and strips surrounding punctuation.
pub fn normalize_evidence(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fraction of evidence tokens that also occur in `utterance`.
pub fn token_overlap(evidence: &str, utterance: &str) -> f64 {
    let e = tokens(evidence);
    if e.is_empty() {
        return 0.0;
    }
    let u = tokens(utterance);
    e.intersection(&u).count() as f64 / e.len() as f64
}

/// Checks the cited evidence against the prompt context.
///
/// `exact`: normalized evidence is a substring of the utterance carrying
/// the cited index. `fuzzy`: a substring of any context utterance, or
/// token overlap of at least `fuzzy_threshold` with one. Otherwise
/// `ungrounded`. Negative verdicts are `not_applicable`.
pub fn ground_evidence(
    mut judgment: ComplianceJudgment,
    digest: &[DigestEntry],
    fuzzy_threshold: f64,
) -> ComplianceJudgment {
    judgment.grounded = grounding_for(&judgment, digest, fuzzy_threshold);
    judgment
}

fn grounding_for(j: &ComplianceJudgment, digest: &[DigestEntry], fuzzy_threshold: f64) -> Grounding {
    if !j.is_completed {
        return Grounding::NotApplicable;
    }
    let Some(evidence) = j.evidence.as_deref() else {
        return Grounding::Ungrounded;
    };
    let needle = normalize_evidence(evidence);
    if needle.is_empty() {
        return Grounding::Ungrounded;
    }
    let contains = |d: &DigestEntry| normalize_evidence(&d.text).contains(&needle);
    if let Some(i) = j.index {
        if digest.iter().filter(|d| d.source_index == i).any(contains) {
            return Grounding::Exact;
        }
    }
    if digest.iter().any(contains)
        || digest
            .iter()
            .any(|d| token_overlap(evidence, &d.text) >= fuzzy_threshold)
    {
        return Grounding::Fuzzy;
    }
    Grounding::Ungrounded
}
