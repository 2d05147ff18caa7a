//! Binary detection metrics with NCP as the positive class, and the
//! percentage-scale report layout used for result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of every report table.
pub const COLUMNS: [&str; 6] = ["Sensitivity", "Specificity", "Precision", "F1-score", "Accuracy", "AUC"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.r#fn + self.tn
    }
}

/// Every ratio is `None` when its denominator is zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    /// Values in table column order.
    pub fn columns(&self) -> [Option<f64>; 6] {
        [
            self.sensitivity,
            self.specificity,
            self.precision,
            self.f1,
            self.accuracy,
            self.auc,
        ]
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Domain(format!("{a} {what} but {b} labels")));
    }
    Ok(())
}

/// Counts decisions against binary labels (1 = NCP).
pub fn confusion(predictions: &[bool], labels: &[u8]) -> Result<ConfusionCounts> {
    check_lengths(predictions.len(), labels.len(), "predictions")?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Evaluated directly over all pairs.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_lengths(scores.len(), labels.len(), "scores")?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 0).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(Some(wins / (pos.len() * neg.len()) as f64))
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down,
/// starting at (0, 0). Tied scores move both rates in one step.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores.len(), labels.len(), "scores")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n_neg, tp / n_pos));
    }
    Ok(points)
}

/// Area under the ROC curve by the trapezoidal rule.
pub fn auc_trapezoid(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 || n_pos == labels.len() {
        check_lengths(scores.len(), labels.len(), "scores")?;
        return Ok(None);
    }
    let points = roc_curve(scores, labels)?;
    Ok(Some(
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum(),
    ))
}

pub fn compute_metrics(counts: &ConfusionCounts, scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let &ConfusionCounts { tp, fp, r#fn, tn } = counts;
    let sensitivity = ratio(tp, tp + r#fn);
    let precision = ratio(tp, tp + fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Ok(MetricsReport {
        sensitivity,
        specificity: ratio(tn, tn + fp),
        precision,
        f1,
        accuracy: ratio(tp + tn, counts.total()),
        auc: auc_trapezoid(scores, labels)?,
        n: counts.total(),
    })
}

/// `0.9985` → `"99.85"`; absent → `"N/A"`.
pub fn format_percent(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "N/A".to_string(),
    }
}

/// A table with one row per labelled report.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<label_width$}", "Method");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>11}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_width$}");
        for v in report.columns() {
            let _ = write!(out, "  {:>11}", format_percent(v));
        }
        out.push('\n');
    }
    out
}

pub fn format_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    for (i, c) in COLUMNS.iter().enumerate() {
        let _ = write!(out, "{}{c:>11}", if i == 0 { "" } else { "  " });
    }
    out.push('\n');
    for (i, v) in report.columns().into_iter().enumerate() {
        let _ = write!(out, "{}{:>11}", if i == 0 { "" } else { "  " }, format_percent(v));
    }
    out.push('\n');
    out
}

/// One scored test slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSlice {
    pub patient_id: String,
    pub p_ncp: f64,
    pub positive: bool,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub slice: MetricsReport,
    /// Majority vote over each patient's slices, for information.
    pub patient: MetricsReport,
}

/// Slice-level metrics plus a patient-level aggregate: a patient is positive
/// when at least half its slices are, and scores by its mean probability.
pub fn evaluate(slices: &[ScoredSlice]) -> Result<Evaluation> {
    let preds: Vec<bool> = slices.iter().map(|s| s.positive).collect();
    let labels: Vec<u8> = slices.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = slices.iter().map(|s| s.p_ncp).collect();
    let counts = confusion(&preds, &labels)?;
    let slice = compute_metrics(&counts, &scores, &labels)?;

    let mut by_patient: BTreeMap<&str, (usize, usize, f64, u8)> = BTreeMap::new();
    for s in slices {
        let e = by_patient.entry(&s.patient_id).or_insert((0, 0, 0.0, s.label));
        if e.3 != s.label {
            return Err(Error::Data(format!("patient {} has mixed labels", s.patient_id)));
        }
        e.0 += usize::from(s.positive);
        e.1 += 1;
        e.2 += s.p_ncp;
    }
    let p_preds: Vec<bool> = by_patient.values().map(|e| 2 * e.0 >= e.1).collect();
    let p_scores: Vec<f64> = by_patient.values().map(|e| e.2 / e.1 as f64).collect();
    let p_labels: Vec<u8> = by_patient.values().map(|e| e.3).collect();
    let patient = compute_metrics(&confusion(&p_preds, &p_labels)?, &p_scores, &p_labels)?;
    Ok(Evaluation { counts, slice, patient })
}
