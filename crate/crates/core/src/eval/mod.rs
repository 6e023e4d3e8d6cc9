//! Confusion matrices, threshold metrics, ROC/AUC and k-fold cross-validation.
//! The positive class is resistant; a score of at least 0.5 predicts positive.

mod cv;
mod metrics;

pub use cv::{aggregate, cross_validate, metric_json, metrics_csv, roc_csv, CvReport, CvSetup, FoldReport};
pub use metrics::{
    auc, auc_scores, confusion, evaluate, metrics, patient_level, roc, ConfusionMatrix, MetricSet, RocCurve,
    METRIC_NAMES, THRESHOLD,
};

#[cfg(test)]
mod tests;
