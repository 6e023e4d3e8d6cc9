use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Positive prediction iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Undefined entries (zero denominator) are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub auc: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "sensitivity", "specificity", "ppv", "npv", "auc"];

impl MetricSet {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.ppv,
            self.npv,
            self.auc,
        ]
    }

    pub fn from_values(v: [Option<f64>; 6]) -> Self {
        MetricSet {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            ppv: v[3],
            npv: v[4],
            auc: v[5],
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// All metrics except AUC.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricSet> {
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    Ok(MetricSet {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        npv: ratio(cm.tn, cm.tn + cm.fn_),
        auc: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold producing each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
}

/// Sweeps `+inf` and then every distinct score, highest first.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(t);
    }
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc(&roc(scores, labels)?))
}

/// Image-level metrics including AUC (absent when a class is missing).
pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<(ConfusionMatrix, MetricSet, Option<RocCurve>)> {
    let cm = confusion(scores, labels, THRESHOLD)?;
    let mut m = metrics(&cm)?;
    let curve = roc(scores, labels).ok();
    m.auc = curve.as_ref().map(auc);
    Ok((cm, m, curve))
}

/// Majority vote over each patient's slices (ties count as positive); the
/// patient's AUC score is the mean slice score.
pub fn patient_level(scores: &[f64], labels: &[bool], patients: &[String]) -> Result<(ConfusionMatrix, MetricSet)> {
    check_inputs(scores, labels)?;
    if patients.len() != scores.len() {
        return Err(Error::Data("patient ids do not match scores".into()));
    }
    let mut by: BTreeMap<&str, (usize, usize, f64, bool)> = BTreeMap::new();
    for ((&s, &y), p) in scores.iter().zip(labels).zip(patients) {
        let e = by.entry(p.as_str()).or_insert((0, 0, 0.0, y));
        e.0 += usize::from(s >= THRESHOLD);
        e.1 += 1;
        e.2 += s;
    }
    let votes: Vec<f64> = by
        .values()
        .map(|&(pos, n, _, _)| if 2 * pos >= n { 1.0 } else { 0.0 })
        .collect();
    let means: Vec<f64> = by.values().map(|&(_, n, sum, _)| sum / n as f64).collect();
    let ys: Vec<bool> = by.values().map(|e| e.3).collect();
    let cm = confusion(&votes, &ys, THRESHOLD)?;
    let mut m = metrics(&cm)?;
    m.auc = auc_scores(&means, &ys).ok();
    Ok((cm, m))
}
