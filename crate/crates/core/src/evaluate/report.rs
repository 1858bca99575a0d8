use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    alignment_average, confusion_counts, unweighted_accuracy, weighted_accuracy, EvalError,
    EvaluationRecord, RatingRecord,
};
use crate::schema_parse::Grounding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub exact: usize,
    pub fuzzy: usize,
    pub ungrounded: usize,
    pub not_applicable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario_id: String,
    pub records: usize,
    pub weighted_accuracy: f64,
    pub unweighted_accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mean_context_size: f64,
    pub mean_alignment: Option<f64>,
    /// Share of backend calls whose first output passed strict parsing;
    /// 1.0 when no call was made.
    pub strict_parse_rate: f64,
    pub failed: usize,
    pub fallback_used: usize,
    pub grounding: GroundingCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub scenarios: Vec<ScenarioReport>,
    /// Pooled over every scenario and session.
    pub overall: ScenarioReport,
}

fn scenario_report(
    scenario_id: &str,
    records: &[&EvaluationRecord],
    ratings: Option<&[RatingRecord]>,
) -> Result<ScenarioReport, EvalError> {
    let owned: Vec<EvaluationRecord> = records.iter().map(|r| (*r).clone()).collect();
    let c = confusion_counts(owned.iter().map(|r| (r.predicted, r.truth)));
    let keys: BTreeSet<(&str, &str)> = records
        .iter()
        .map(|r| (r.session_id.as_str(), r.item_id.as_str()))
        .collect();
    let mean_alignment = ratings.and_then(|rs| {
        alignment_average(rs, |r| keys.contains(&(r.session_id.as_str(), r.item_id.as_str()))).ok()
    });
    let called: Vec<bool> = records.iter().filter_map(|r| r.strict_parse).collect();
    let strict_parse_rate = if called.is_empty() {
        1.0
    } else {
        called.iter().filter(|s| **s).count() as f64 / called.len() as f64
    };
    let mut grounding = GroundingCounts::default();
    for r in records {
        match r.grounded {
            Grounding::Exact => grounding.exact += 1,
            Grounding::Fuzzy => grounding.fuzzy += 1,
            Grounding::Ungrounded => grounding.ungrounded += 1,
            Grounding::NotApplicable => grounding.not_applicable += 1,
        }
    }
    Ok(ScenarioReport {
        scenario_id: scenario_id.to_string(),
        records: records.len(),
        weighted_accuracy: weighted_accuracy(&owned)?,
        unweighted_accuracy: unweighted_accuracy(&owned)?,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        mean_context_size: records.iter().map(|r| r.context_size as f64).sum::<f64>()
            / records.len() as f64,
        mean_alignment,
        strict_parse_rate,
        failed: records.iter().filter(|r| r.status.is_failure()).count(),
        fallback_used: records.iter().filter(|r| r.fallback_used).count(),
        grounding,
    })
}

/// One report per model, each with per-scenario rows and a pooled row.
/// Records must already carry normalized priorities. Output does not depend
/// on record order.
pub fn build_report(
    records: &[EvaluationRecord],
    ratings: Option<&[RatingRecord]>,
) -> Result<Vec<ModelReport>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted: Vec<&EvaluationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.model, &a.scenario_id, &a.session_id, &a.item_id)
            .cmp(&(&b.model, &b.scenario_id, &b.session_id, &b.item_id))
    });
    let mut by_model: BTreeMap<&str, Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in sorted {
        by_model.entry(r.model.as_str()).or_default().push(r);
    }
    by_model
        .into_iter()
        .map(|(model, recs)| {
            let mut by_scenario: BTreeMap<&str, Vec<&EvaluationRecord>> = BTreeMap::new();
            for r in &recs {
                by_scenario.entry(r.scenario_id.as_str()).or_default().push(r);
            }
            let scenarios = by_scenario
                .into_iter()
                .map(|(sc, rs)| scenario_report(sc, &rs, ratings))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ModelReport {
                model: model.to_string(),
                scenarios,
                overall: scenario_report("overall", &recs, ratings)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table: one row per scenario plus the pooled row.
pub fn render_report_table(reports: &[ModelReport]) -> String {
    let mut out = String::new();
    for m in reports {
        let _ = writeln!(out, "model: {}", m.model);
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>9} {:>9} {:>4} {:>4} {:>4} {:>4} {:>8} {:>9} {:>7} {:>6}",
            "scenario", "n", "w_acc%", "acc%", "tp", "fp", "tn", "fn", "ctx", "align", "strict", "failed"
        );
        for s in m.scenarios.iter().chain(std::iter::once(&m.overall)) {
            let _ = writeln!(
                out,
                "{:<24} {:>5} {:>9.1} {:>9.1} {:>4} {:>4} {:>4} {:>4} {:>8.2} {:>9} {:>7.2} {:>6}",
                s.scenario_id,
                s.records,
                s.weighted_accuracy * 100.0,
                s.unweighted_accuracy * 100.0,
                s.tp,
                s.fp,
                s.tn,
                s.fn_,
                s.mean_context_size,
                fmt_opt(s.mean_alignment),
                s.strict_parse_rate,
                s.failed
            );
        }
        out.push('\n');
    }
    out
}
