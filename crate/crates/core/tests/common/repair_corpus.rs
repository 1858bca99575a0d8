//! Loader and checker for the malformed-output corpus: `NN_slug.txt` holds
//! raw model output, `NN_slug.expected.json` the expected interpretation.

use std::fs;

use protocheck::llm_client::RawCompletion;
use protocheck::prompting::DigestEntry;
use protocheck::schema_parse::{interpret, parse_strict, repair_and_parse, DEFAULT_FUZZY_THRESHOLD};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Expected {
    Judgment {
        is_completed: bool,
        index: Option<u64>,
        evidence: Option<String>,
        repair_applied: Vec<String>,
        grounded: String,
        strict_valid: bool,
    },
    Rejection {
        reason: String,
    },
}

pub struct Case {
    pub name: String,
    pub raw: String,
    pub expected: Expected,
}

pub fn digest() -> Vec<DigestEntry> {
    let body = fs::read_to_string(super::fixtures().join("malformed").join("digest.json")).unwrap();
    serde_json::from_str(&body).unwrap()
}

pub fn cases() -> Vec<Case> {
    let dir = super::fixtures().join("malformed");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.strip_suffix(".txt").map(str::to_string)
        })
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let raw = fs::read_to_string(dir.join(format!("{name}.txt"))).unwrap();
            let exp = fs::read_to_string(dir.join(format!("{name}.expected.json"))).unwrap();
            Case {
                expected: serde_json::from_str(&exp).unwrap_or_else(|e| panic!("{name}: {e}")),
                name,
                raw,
            }
        })
        .collect()
}

fn raw(text: &str) -> RawCompletion {
    RawCompletion {
        item_id: "item".into(),
        text: text.into(),
        latency_ms: 0,
        attempt: 1,
    }
}

fn name_of<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v).unwrap() {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Checks one case; returns a description of the first mismatch.
pub fn check(case: &Case, digest: &[DigestEntry]) -> Result<(), String> {
    let input = raw(&case.raw);
    let outcome = repair_and_parse(&input, digest);
    // the ladder is deterministic
    if repair_and_parse(&input, digest) != outcome {
        return Err("repair is not deterministic".into());
    }
    let (interpreted, strict_ok) = interpret(&input, digest, DEFAULT_FUZZY_THRESHOLD);
    match (&case.expected, outcome) {
        (
            Expected::Judgment {
                is_completed,
                index,
                evidence,
                repair_applied,
                grounded,
                strict_valid,
            },
            Ok(j),
        ) => {
            let steps: Vec<String> = j.repair_applied.iter().map(name_of).collect();
            let got = (j.is_completed, j.index, j.evidence.clone(), steps, name_of(&j.grounded));
            let want = (*is_completed, *index, evidence.clone(), repair_applied.clone(), grounded.clone());
            if got != want {
                return Err(format!("got {got:?}, expected {want:?}"));
            }
            let strict = parse_strict(&input, digest);
            if strict.is_ok() != *strict_valid || strict_ok != *strict_valid {
                return Err(format!("strict acceptance is {}, expected {strict_valid}", strict.is_ok()));
            }
            if let Ok(s) = strict {
                // strict output is a fixed point of the ladder
                if s != j || !j.repair_applied.is_empty() {
                    return Err("strict judgment differs from repaired judgment".into());
                }
            }
            if interpreted.as_ref().ok() != Some(&j) {
                return Err("interpret disagrees with repair_and_parse".into());
            }
            Ok(())
        }
        (Expected::Rejection { reason }, Err(rej)) => {
            if name_of(&rej.reason) != *reason {
                return Err(format!("rejected as {:?}, expected {reason}", rej.reason));
            }
            if rej.raw_text != case.raw {
                return Err("rejection does not carry the raw text".into());
            }
            if parse_strict(&input, digest).is_ok() || strict_ok {
                return Err("strict parse accepted a case the ladder rejects".into());
            }
            Ok(())
        }
        (Expected::Judgment { .. }, Err(rej)) => Err(format!("rejected ({:?}: {})", rej.reason, rej.detail)),
        (Expected::Rejection { reason }, Ok(j)) => Err(format!("accepted {j:?}, expected rejection {reason}")),
    }
}

/// Runs every case; returns the case count or all mismatches.
pub fn check_all() -> Result<usize, String> {
    let digest = digest();
    let cases = cases();
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|c| check(c, &digest).err().map(|e| format!("{}: {e}", c.name)))
        .collect();
    if failures.is_empty() {
        Ok(cases.len())
    } else {
        Err(failures.join("\n"))
    }
}
