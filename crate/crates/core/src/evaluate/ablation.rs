//! Context-selection ablation: the same sessions, backend and config run
//! once per condition, with only the selection stages swapped.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    build_report, evaluation_records, normalize_priorities, ModelReport, NormalizationMode,
    RatingRecord,
};
use crate::context::ContextMode;
use crate::corpus::Session;
use crate::llm_client::Backend;
use crate::pipeline::{run_pipeline, PipelineOptions, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: ContextMode,
    pub ok: bool,
    pub error: Option<String>,
    pub items: usize,
    pub mean_context_size: f64,
    pub weighted_accuracy: Option<f64>,
    pub unweighted_accuracy: Option<f64>,
    pub mean_alignment: Option<f64>,
    pub failed_items: usize,
    #[serde(skip)]
    pub predictions: Vec<PredictionRecord>,
    #[serde(skip)]
    pub report: Option<Vec<ModelReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, condition: ContextMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>10} {:>9} {:>9} {:>7} {:>7}",
            "condition", "items", "ctx_mean", "w_acc%", "acc%", "align", "failed"
        );
        let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            if !r.ok {
                let _ = writeln!(
                    out,
                    "{:<24} FAILED: {}",
                    r.condition.as_str(),
                    r.error.as_deref().unwrap_or("unknown error")
                );
                continue;
            }
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>10.2} {:>9} {:>9} {:>7} {:>7}",
                r.condition.as_str(),
                r.items,
                r.mean_context_size,
                pct(r.weighted_accuracy),
                pct(r.unweighted_accuracy),
                r.mean_alignment.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()),
                r.failed_items
            );
        }
        out
    }
}

pub struct AblationInputs<'a> {
    pub sessions: &'a [Session],
    pub base: PipelineOptions<'a>,
    pub normalization: NormalizationMode,
    pub ratings: Option<&'a [RatingRecord]>,
}

/// Runs every condition in `conditions` (in the given order). A fresh
/// backend is built per condition so scripted backends start from the same
/// state. A failing condition is recorded and the rest still run.
pub fn run_ablation(
    inputs: &AblationInputs<'_>,
    conditions: &[ContextMode],
    make_backend: &dyn Fn() -> Result<Box<dyn Backend>, String>,
) -> AblationTable {
    let rows = conditions
        .iter()
        .map(|&condition| match run_condition(inputs, condition, make_backend) {
            Ok(row) => row,
            Err(e) => AblationRow {
                condition,
                ok: false,
                error: Some(e),
                items: 0,
                mean_context_size: 0.0,
                weighted_accuracy: None,
                unweighted_accuracy: None,
                mean_alignment: None,
                failed_items: 0,
                predictions: Vec::new(),
                report: None,
            },
        })
        .collect();
    AblationTable { rows }
}

fn run_condition(
    inputs: &AblationInputs<'_>,
    condition: ContextMode,
    make_backend: &dyn Fn() -> Result<Box<dyn Backend>, String>,
) -> Result<AblationRow, String> {
    let backend = make_backend()?;
    let health = backend.healthcheck();
    if !health.healthy {
        return Err(format!("backend unhealthy: {}", health.describe()));
    }
    let opts = PipelineOptions {
        mode: condition,
        ..inputs.base
    };
    let predictions = run_pipeline(inputs.sessions, &opts, backend.as_ref(), &BTreeSet::new(), |_| {});
    if predictions.is_empty() {
        return Err("no evaluation items".into());
    }
    let mean_context_size =
        predictions.iter().map(|p| p.context_size as f64).sum::<f64>() / predictions.len() as f64;
    let failed_items = predictions.iter().filter(|p| p.status.is_failure()).count();

    let has_truth = inputs.sessions.iter().all(|s| s.ground_truth.is_some());
    let (report, weighted, unweighted, alignment) = if has_truth {
        let mut records = evaluation_records(&predictions, inputs.sessions).map_err(|e| e.to_string())?;
        normalize_priorities(&mut records, inputs.normalization).map_err(|e| e.to_string())?;
        let report = build_report(&records, inputs.ratings).map_err(|e| e.to_string())?;
        let overall = &report[0].overall;
        let (w, u, a) = (overall.weighted_accuracy, overall.unweighted_accuracy, overall.mean_alignment);
        (Some(report), Some(w), Some(u), a)
    } else {
        (None, None, None, None)
    };

    Ok(AblationRow {
        condition,
        ok: true,
        error: None,
        items: predictions.len(),
        mean_context_size,
        weighted_accuracy: weighted,
        unweighted_accuracy: unweighted,
        mean_alignment: alignment,
        failed_items,
        predictions,
        report,
    })
}
