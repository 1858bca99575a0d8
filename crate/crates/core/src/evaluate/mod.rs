//! Scoring against expert ground truth.
//!
//! Priorities are normalized per `(session, scenario)` group so that a
//! group of `m` items has weights summing to `m`. Weighted accuracy is then
//! the mean over all records of `p_n * [predicted_n == truth_n]`, which is
//! exactly 1 for perfect predictions.

pub mod ablation;
mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Session;
use crate::pipeline::{ItemStatus, PredictionRecord};
use crate::schema_parse::{Grounding, RepairStep};

pub use crate::context::ContextMode as AblationCondition;
pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use report::{build_report, render_report_table, ModelReport, ScenarioReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    EmptyInput,
    #[error("scenario group has no records")]
    EmptyScenario,
    #[error("missing ground truth for {session_id}/{item_id}")]
    MissingGroundTruth { session_id: String, item_id: String },
    #[error("prediction references unknown item {session_id}/{item_id}")]
    UnknownItem { session_id: String, item_id: String },
    #[error("priority {priority} of {item_id} is outside 1..=4")]
    PriorityOutOfRange { item_id: String, priority: u8 },
    #[error("priorities of {group} sum to {total}; run normalize_priorities first")]
    NotNormalized { group: String, total: f64 },
    #[error("ratings file {path}: {detail}")]
    Ratings { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `p_j = q_j * m / sum(q)`; perfect predictions score 1.
    #[default]
    ScaledToCount,
    /// `p_j = q_j / sum(q)`, for sensitivity checks only.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub session_id: String,
    pub scenario_id: String,
    pub item_id: String,
    pub model: String,
    pub predicted: bool,
    pub truth: bool,
    pub raw_priority: u8,
    pub norm_priority: f64,
    pub status: ItemStatus,
    pub grounded: Grounding,
    pub repair_applied: Vec<RepairStep>,
    pub fallback_used: bool,
    pub strict_parse: Option<bool>,
    pub context_size: usize,
}

impl EvaluationRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

/// Joins predictions with the ground truth carried by the sessions.
///
/// Failed items (unparseable after re-ask, or backend errors) are scored
/// as the opposite of the truth so they always count as wrong.
pub fn evaluation_records(
    predictions: &[PredictionRecord],
    sessions: &[Session],
) -> Result<Vec<EvaluationRecord>, EvalError> {
    let by_id: BTreeMap<&str, &Session> = sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    predictions
        .iter()
        .map(|p| {
            let unknown = || EvalError::UnknownItem {
                session_id: p.session_id.clone(),
                item_id: p.item_id.clone(),
            };
            let session = by_id.get(p.session_id.as_str()).ok_or_else(unknown)?;
            let item = session
                .evaluation_items()
                .find(|i| i.item_id == p.item_id)
                .ok_or_else(unknown)?;
            let truth = session.truth(&p.item_id).ok_or_else(|| EvalError::MissingGroundTruth {
                session_id: p.session_id.clone(),
                item_id: p.item_id.clone(),
            })?;
            let predicted = match (p.status.is_failure(), p.is_completed) {
                (false, Some(v)) => v,
                _ => !truth,
            };
            Ok(EvaluationRecord {
                session_id: p.session_id.clone(),
                scenario_id: item.event_id.clone(),
                item_id: p.item_id.clone(),
                model: p.model.clone(),
                predicted,
                truth,
                raw_priority: item.priority,
                norm_priority: 0.0,
                status: p.status,
                grounded: p.grounded,
                repair_applied: p.repair_applied.clone(),
                fallback_used: p.fallback_used,
                strict_parse: p.strict_parse,
                context_size: p.context_size,
            })
        })
        .collect()
}

/// Fills `norm_priority` within each `(model, session, scenario)` group.
pub fn normalize_priorities(
    records: &mut [EvaluationRecord],
    mode: NormalizationMode,
) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyScenario);
    }
    let mut sums: BTreeMap<(&str, &str, &str), (u32, usize)> = BTreeMap::new();
    for r in records.iter() {
        if !(1..=4).contains(&r.raw_priority) {
            return Err(EvalError::PriorityOutOfRange {
                item_id: r.item_id.clone(),
                priority: r.raw_priority,
            });
        }
        let e = sums
            .entry((r.model.as_str(), r.session_id.as_str(), r.scenario_id.as_str()))
            .or_default();
        e.0 += u32::from(r.raw_priority);
        e.1 += 1;
    }
    let sums: BTreeMap<(String, String, String), (u32, usize)> = sums
        .into_iter()
        .map(|((a, b, c), v)| ((a.to_string(), b.to_string(), c.to_string()), v))
        .collect();
    for r in records.iter_mut() {
        let (sum, m) = sums[&(r.model.clone(), r.session_id.clone(), r.scenario_id.clone())];
        let q = f64::from(r.raw_priority);
        r.norm_priority = match mode {
            NormalizationMode::ScaledToCount => q * m as f64 / f64::from(sum),
            NormalizationMode::Proportional => q / f64::from(sum),
        };
    }
    Ok(())
}

/// Mean of `p_n * [correct]` over all records. Each normalization group
/// carries an integer total weight, so the sum is taken per group as that
/// total times the correct share of its weight. Perfect and all-wrong
/// predictions then land on exactly 1 and 0.
pub fn weighted_accuracy(records: &[EvaluationRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut groups: BTreeMap<(&str, &str, &str), (f64, f64)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.model.as_str(), r.session_id.as_str(), r.scenario_id.as_str()))
            .or_default();
        g.0 += r.norm_priority;
        if r.correct() {
            g.1 += r.norm_priority;
        }
    }
    let mut hits = 0.0;
    for ((_, session, scenario), (total, correct)) in groups {
        let whole = total.round();
        if whole < 1.0 || (total - whole).abs() > 1e-6 {
            return Err(EvalError::NotNormalized {
                group: format!("{session}/{scenario}"),
                total,
            });
        }
        hits += whole * (correct / total);
    }
    Ok(hits / records.len() as f64)
}

pub fn unweighted_accuracy(records: &[EvaluationRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion_counts<'a>(pairs: impl IntoIterator<Item = (bool, bool)> + 'a) -> Confusion {
    let mut c = Confusion::default();
    for (predicted, truth) in pairs {
        match (predicted, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub item_id: String,
    pub rater_id: String,
    pub score: u8,
}

/// Reads a ratings CSV with header `session_id,item_id,rater_id,score`.
pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>, EvalError> {
    let err = |detail: String| EvalError::Ratings {
        path: path.display().to_string(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<RatingRecord>() {
        let row = row.map_err(|e| err(e.to_string()))?;
        if row.score > 2 {
            return Err(err(format!(
                "score {} for {}/{} is not 0, 1 or 2",
                row.score, row.session_id, row.item_id
            )));
        }
        out.push(row);
    }
    Ok(out)
}

/// Mean alignment over items in scope. Several raters on one item are
/// averaged first, then items are averaged.
pub fn alignment_average(
    ratings: &[RatingRecord],
    in_scope: impl Fn(&RatingRecord) -> bool,
) -> Result<f64, EvalError> {
    let mut per_item: BTreeMap<(&str, &str), (u32, u32)> = BTreeMap::new();
    for r in ratings.iter().filter(|r| in_scope(r)) {
        let e = per_item.entry((&r.session_id, &r.item_id)).or_default();
        e.0 += u32::from(r.score);
        e.1 += 1;
    }
    if per_item.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let total: f64 = per_item.values().map(|(s, n)| f64::from(*s) / f64::from(*n)).sum();
    Ok(total / per_item.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(session: &str, scenario: &str, item: &str, q: u8, predicted: bool, truth: bool) -> EvaluationRecord {
        EvaluationRecord {
            session_id: session.into(),
            scenario_id: scenario.into(),
            item_id: item.into(),
            model: "m".into(),
            predicted,
            truth,
            raw_priority: q,
            norm_priority: 0.0,
            status: ItemStatus::Judged,
            grounded: Grounding::NotApplicable,
            repair_applied: vec![],
            fallback_used: false,
            strict_parse: Some(true),
            context_size: 1,
        }
    }

    #[test]
    fn normalization_examples() {
        let mut r = vec![
            rec("s", "c", "a", 4, true, true),
            rec("s", "c", "b", 3, true, false),
            rec("s", "c", "d", 2, false, false),
        ];
        normalize_priorities(&mut r, NormalizationMode::ScaledToCount).unwrap();
        let p: Vec<f64> = r.iter().map(|x| x.norm_priority).collect();
        assert!((p[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((weighted_accuracy(&r).unwrap() - 2.0 / 3.0).abs() < 1e-9);

        let mut same = vec![rec("s", "c", "a", 2, true, true), rec("s", "c", "b", 2, true, true)];
        normalize_priorities(&mut same, NormalizationMode::ScaledToCount).unwrap();
        assert!(same.iter().all(|x| x.norm_priority == 1.0));

        let mut one = vec![rec("s", "c", "a", 3, true, true)];
        normalize_priorities(&mut one, NormalizationMode::ScaledToCount).unwrap();
        assert_eq!(one[0].norm_priority, 1.0);

        let mut prop = vec![rec("s", "c", "a", 3, true, true), rec("s", "c", "b", 1, true, true)];
        normalize_priorities(&mut prop, NormalizationMode::Proportional).unwrap();
        assert_eq!(prop[0].norm_priority, 0.75);
    }

    #[test]
    fn groups_are_per_session_and_scenario() {
        let mut r = vec![
            rec("s1", "c", "a", 4, true, true),
            rec("s2", "c", "a", 1, true, true),
            rec("s1", "d", "b", 2, true, true),
        ];
        normalize_priorities(&mut r, NormalizationMode::ScaledToCount).unwrap();
        assert!(r.iter().all(|x| x.norm_priority == 1.0));
    }

    #[test]
    fn extremes() {
        let mut right = vec![rec("s", "c", "a", 4, true, true), rec("s", "c", "b", 1, false, false)];
        normalize_priorities(&mut right, NormalizationMode::ScaledToCount).unwrap();
        assert_eq!(weighted_accuracy(&right).unwrap(), 1.0);
        let mut wrong = vec![rec("s", "c", "a", 4, false, true), rec("s", "c", "b", 1, true, false)];
        normalize_priorities(&mut wrong, NormalizationMode::ScaledToCount).unwrap();
        assert_eq!(weighted_accuracy(&wrong).unwrap(), 0.0);
        assert!(matches!(weighted_accuracy(&[]), Err(EvalError::EmptyInput)));
        assert!(matches!(
            normalize_priorities(&mut [], NormalizationMode::ScaledToCount),
            Err(EvalError::EmptyScenario)
        ));
    }

    #[test]
    fn confusion() {
        assert_eq!(confusion_counts(vec![(true, true); 3]), Confusion { tp: 3, ..Default::default() });
        assert_eq!(
            confusion_counts(vec![(true, true), (true, false), (false, false), (false, true)]),
            Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 }
        );
        assert_eq!(confusion_counts(Vec::new()), Confusion::default());
    }

    fn rating(item: &str, rater: &str, score: u8) -> RatingRecord {
        RatingRecord {
            session_id: "s".into(),
            item_id: item.into(),
            rater_id: rater.into(),
            score,
        }
    }

    #[test]
    fn alignment_means() {
        let flat: Vec<_> = [2, 1, 2, 2, 1]
            .iter()
            .enumerate()
            .map(|(i, &s)| rating(&format!("i{i}"), "r", s))
            .collect();
        assert!((alignment_average(&flat, |_| true).unwrap() - 1.6).abs() < 1e-12);
        let top: Vec<_> = (0..3).map(|i| rating(&format!("i{i}"), "r", 2)).collect();
        assert_eq!(alignment_average(&top, |_| true).unwrap(), 2.0);
        let two_level = vec![rating("a", "r1", 2), rating("a", "r2", 1), rating("b", "r1", 1)];
        assert_eq!(alignment_average(&two_level, |_| true).unwrap(), 1.25);
        assert!(matches!(alignment_average(&two_level, |_| false), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn ratings_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "session_id,item_id,rater_id,score\ns,a,r1,2\ns,b,r1,0\n").unwrap();
        assert_eq!(load_ratings(&p).unwrap().len(), 2);
        std::fs::write(&p, "session_id,item_id,rater_id,score\ns,a,r1,3\n").unwrap();
        assert!(load_ratings(&p).is_err());
    }
}
