//! Cross-backbone averages, rounded as reported, with best-baseline and
//! best-overall flags per column.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: String,
    /// Accuracy in percent.
    pub accuracy_pct: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: String,
    pub is_baseline: bool,
    pub per_variant: Vec<VariantScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub is_baseline: bool,
    pub per_variant: Vec<VariantScore>,
    /// Mean accuracy in percent, one decimal.
    pub avg_accuracy_pct: f64,
    /// Mean AUROC, three decimals.
    pub avg_auroc: f64,
    pub best_baseline_accuracy: bool,
    pub best_baseline_auroc: bool,
    pub best_accuracy: bool,
    pub best_auroc: bool,
}

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

pub fn summarize_results(methods: &[MethodResults]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        if m.per_variant.is_empty() {
            return Err(Error::EmptyEval(format!(
                "{} has no per-variant results",
                m.method
            )));
        }
        let n = m.per_variant.len() as f64;
        let acc = m.per_variant.iter().map(|v| v.accuracy_pct).sum::<f64>() / n;
        let auroc = m.per_variant.iter().map(|v| v.auroc).sum::<f64>() / n;
        rows.push(SummaryRow {
            method: m.method.clone(),
            is_baseline: m.is_baseline,
            per_variant: m.per_variant.clone(),
            avg_accuracy_pct: round_to(acc, 1),
            avg_auroc: round_to(auroc, 3),
            best_baseline_accuracy: false,
            best_baseline_auroc: false,
            best_accuracy: false,
            best_auroc: false,
        });
    }
    let best = |rows: &[SummaryRow], baseline_only: bool, f: fn(&SummaryRow) -> f64| {
        rows.iter()
            .filter(|r| !baseline_only || r.is_baseline)
            .map(f)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let acc = |r: &SummaryRow| r.avg_accuracy_pct;
    let auc = |r: &SummaryRow| r.avg_auroc;
    let (bb_acc, bb_auc) = (best(&rows, true, acc), best(&rows, true, auc));
    let (b_acc, b_auc) = (best(&rows, false, acc), best(&rows, false, auc));
    for r in &mut rows {
        r.best_baseline_accuracy = r.is_baseline && r.avg_accuracy_pct == bb_acc;
        r.best_baseline_auroc = r.is_baseline && r.avg_auroc == bb_auc;
        r.best_accuracy = r.avg_accuracy_pct == b_acc;
        r.best_auroc = r.avg_auroc == b_auc;
    }
    Ok(rows)
}

#[derive(Debug, Deserialize)]
struct ResultRecord {
    method: String,
    baseline: bool,
    variant: String,
    accuracy: f64,
    auroc: f64,
}

/// Reads `method,baseline,variant,accuracy,auroc` rows (accuracy in percent),
/// grouping them by method in order of first appearance.
pub fn read_results_csv(path: &Path) -> Result<Vec<MethodResults>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<MethodResults> = Vec::new();
    for rec in r.deserialize() {
        let rec: ResultRecord = rec?;
        let score = VariantScore {
            variant: rec.variant,
            accuracy_pct: rec.accuracy,
            auroc: rec.auroc,
        };
        match out.iter_mut().find(|m| m.method == rec.method) {
            Some(m) => m.per_variant.push(score),
            None => out.push(MethodResults {
                method: rec.method,
                is_baseline: rec.baseline,
                per_variant: vec![score],
            }),
        }
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "baseline",
        "avg_accuracy",
        "avg_auroc",
        "best_baseline_accuracy",
        "best_baseline_auroc",
        "best_accuracy",
        "best_auroc",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.is_baseline.to_string(),
            format!("{:.1}", r.avg_accuracy_pct),
            format!("{:.3}", r.avg_auroc),
            r.best_baseline_accuracy.to_string(),
            r.best_baseline_auroc.to_string(),
            r.best_accuracy.to_string(),
            r.best_auroc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
