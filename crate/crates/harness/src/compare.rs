//! Side-by-side comparison of two run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::RunSummary;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldDelta {
    pub fold: usize,
    pub overall_a: f64,
    pub overall_b: f64,
    pub delta: f64,
    pub comms_a: u64,
    pub comms_b: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub fold: usize,
    pub client: usize,
    pub ticks_a: Vec<usize>,
    pub ticks_b: Vec<usize>,
}

/// Differences are always `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub name_a: String,
    pub name_b: String,
    pub overall_delta: f64,
    pub per_concept_delta: BTreeMap<usize, f64>,
    pub comms_delta: f64,
    pub folds: Vec<FoldDelta>,
    pub detections: Vec<LatencyRow>,
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Result<CompareReport> {
    if a.folds.len() != b.folds.len() {
        return Err(HarnessError::Input(format!(
            "fold structure differs: {} folds vs {}",
            a.folds.len(),
            b.folds.len()
        )));
    }
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        if fa.fold != fb.fold || fa.test_source != fb.test_source {
            return Err(HarnessError::Input(format!(
                "fold {} tests on `{}` in one summary and fold {} on `{}` in the other",
                fa.fold, fa.test_source, fb.fold, fb.test_source
            )));
        }
    }
    let per_concept_delta = a
        .mean_per_concept
        .iter()
        .filter_map(|(c, va)| b.mean_per_concept.get(c).map(|vb| (*c, vb - va)))
        .collect();
    let folds = a
        .folds
        .iter()
        .zip(&b.folds)
        .map(|(fa, fb)| FoldDelta {
            fold: fa.fold,
            overall_a: fa.overall,
            overall_b: fb.overall,
            delta: fb.overall - fa.overall,
            comms_a: fa.comms_sent + fa.comms_received,
            comms_b: fb.comms_sent + fb.comms_received,
        })
        .collect();
    let mut detections = Vec::new();
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        let clients = fa.detections.len().max(fb.detections.len());
        for client in 0..clients {
            detections.push(LatencyRow {
                fold: fa.fold,
                client,
                ticks_a: fa.detections.get(client).cloned().unwrap_or_default(),
                ticks_b: fb.detections.get(client).cloned().unwrap_or_default(),
            });
        }
    }
    Ok(CompareReport {
        name_a: a.name.clone(),
        name_b: b.name.clone(),
        overall_delta: b.mean_overall - a.mean_overall,
        per_concept_delta,
        comms_delta: b.mean_comms - a.mean_comms,
        folds,
        detections,
    })
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "comparison: {} -> {}", self.name_a, self.name_b);
        let _ = writeln!(s, "overall accuracy delta: {:+.4}", self.overall_delta);
        for (c, d) in &self.per_concept_delta {
            let _ = writeln!(s, "concept {c} accuracy delta: {d:+.4}");
        }
        let _ = writeln!(s, "mean communications delta: {:+.1}", self.comms_delta);
        let _ = writeln!(s, "\nfold,overall_a,overall_b,delta,comms_a,comms_b");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:+.4},{},{}",
                f.fold, f.overall_a, f.overall_b, f.delta, f.comms_a, f.comms_b
            );
        }
        if self.detections.iter().any(|r| !r.ticks_a.is_empty() || !r.ticks_b.is_empty()) {
            let _ = writeln!(s, "\nfold,client,detections_a,detections_b");
            for r in &self.detections {
                let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                let _ = writeln!(s, "{},{},{},{}", r.fold, r.client, join(&r.ticks_a), join(&r.ticks_b));
            }
        }
        s
    }
}
