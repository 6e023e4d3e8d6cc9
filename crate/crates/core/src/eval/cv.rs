use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::metrics::{evaluate, patient_level, ConfusionMatrix, MetricSet, RocCurve, METRIC_NAMES};
use crate::data::{balance_minority, make_split, Augmenter, Dataset, Modality, NormStats, PatientRecord, Subset};
use crate::error::{Error, Result};
use crate::io_util::{fmt6, write_string};
use crate::models::{Model, ModelConfig};
use crate::train::{predict, train, StopReason, TrainConfig, TrainHistory};

#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub confusion: ConfusionMatrix,
    pub image: MetricSet,
    pub patient_confusion: ConfusionMatrix,
    pub patient: MetricSet,
    /// Normalization fitted on this fold's training subset.
    #[serde(skip)]
    pub norm: NormStats,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
    #[serde(skip)]
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Image-level mean over folds (canonical).
    pub mean: MetricSet,
    pub std: MetricSet,
    pub patient_mean: MetricSet,
    pub param_count: usize,
    pub config: Value,
}

/// Mean and sample standard deviation per metric over folds where it is defined.
pub fn aggregate(sets: &[MetricSet]) -> (MetricSet, MetricSet) {
    let mut mean = [None; 6];
    let mut std = [None; 6];
    for j in 0..6 {
        let v: Vec<f64> = sets.iter().filter_map(|m| m.values()[j]).collect();
        if v.is_empty() {
            continue;
        }
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        } else {
            0.0
        };
        mean[j] = Some(mu);
        std[j] = Some(var.sqrt());
    }
    (MetricSet::from_values(mean), MetricSet::from_values(std))
}

/// Rounded to six decimals, or `"n/a"`.
pub fn metric_json(v: Option<f64>) -> Value {
    match v {
        Some(x) => json!((x * 1e6).round() / 1e6),
        None => json!("n/a"),
    }
}

fn metric_text(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt6)
}

fn set_json(m: &MetricSet) -> Value {
    Value::Object(
        METRIC_NAMES
            .iter()
            .zip(m.values())
            .map(|(n, v)| (n.to_string(), metric_json(v)))
            .collect(),
    )
}

impl CvReport {
    pub fn to_json(&self) -> Value {
        let folds: Vec<Value> = self
            .folds
            .iter()
            .map(|f| {
                json!({
                    "fold": f.fold,
                    "n_train": f.n_train,
                    "n_val": f.n_val,
                    "n_test": f.n_test,
                    "best_epoch": f.best_epoch,
                    "stop_reason": f.stop_reason,
                    "confusion": f.confusion,
                    "image": set_json(&f.image),
                    "patient_confusion": f.patient_confusion,
                    "patient": set_json(&f.patient),
                    "norm_mean": f.norm.mean.iter().map(|&v| metric_json(Some(v))).collect::<Vec<_>>(),
                    "norm_std": f.norm.std.iter().map(|&v| metric_json(Some(v))).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "config": self.config,
            "param_count": self.param_count,
            "level": "image",
            "mean": set_json(&self.mean),
            "std": set_json(&self.std),
            "patient_mean": set_json(&self.patient_mean),
            "folds": folds,
        })
    }
}

pub fn metrics_csv(image: &MetricSet, patient: &MetricSet) -> String {
    let mut s = String::from("metric,value\n");
    for (n, v) in METRIC_NAMES.iter().zip(image.values()) {
        s.push_str(&format!("{n},{}\n", metric_text(v)));
    }
    for (n, v) in METRIC_NAMES.iter().zip(patient.values()) {
        s.push_str(&format!("patient_{n},{}\n", metric_text(v)));
    }
    s
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for (t, (fpr, tpr)) in curve.thresholds.iter().zip(&curve.points) {
        let t = if t.is_infinite() { "inf".to_string() } else { fmt6(*t) };
        s.push_str(&format!("{t},{},{}\n", fmt6(*fpr), fmt6(*tpr)));
    }
    s
}

/// Everything one cross-validation run needs.
pub struct CvSetup<'a> {
    pub records: &'a [PatientRecord],
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub k: usize,
    pub modality: Modality,
    /// Split seed; fold `f` trains with `train.seed + f` and initializes with `seed + f`.
    pub seed: u64,
    /// When set, each fold writes `fold<f>/` here.
    pub out_dir: Option<&'a Path>,
    pub config_echo: Value,
}

/// Balances, splits, trains one model per fold and evaluates its test fold.
pub fn cross_validate(setup: &CvSetup<'_>) -> Result<CvReport> {
    if setup.modality.channels() != setup.model.in_channels {
        return Err(Error::Config(format!(
            "{:?} needs in_channels = {}, model has {}",
            setup.modality,
            setup.modality.channels(),
            setup.model.in_channels
        )));
    }
    if setup.k < 3 {
        return Err(Error::Config(format!(
            "k = {} leaves no training folds; need at least 3",
            setup.k
        )));
    }
    setup.model.validate()?;
    setup.train.validate()?;
    let records = balance_minority(setup.records.to_vec());
    let plan = make_split(&records, setup.k, setup.seed)?;
    let mut folds = Vec::with_capacity(setup.k);
    let mut param_count = 0;
    for f in 0..setup.k {
        let report = run_fold(setup, &records, &plan, f).map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?;
        param_count = report.1;
        folds.push(report.0);
    }
    let (mean, std) = aggregate(&folds.iter().map(|f| f.image).collect::<Vec<_>>());
    let (patient_mean, _) = aggregate(&folds.iter().map(|f| f.patient).collect::<Vec<_>>());
    Ok(CvReport {
        folds,
        mean,
        std,
        patient_mean,
        param_count,
        config: setup.config_echo.clone(),
    })
}

fn run_fold(
    setup: &CvSetup<'_>,
    records: &[PatientRecord],
    plan: &crate::data::SplitPlan,
    f: usize,
) -> Result<(FoldReport, usize)> {
    let size = setup.model.input_size;
    let build = |s| Dataset::build(records, &plan.ids(f, s), size, setup.modality);
    let (tr, va, te) = (build(Subset::Train)?, build(Subset::Val)?, build(Subset::Test)?);
    let stats = NormStats::fit(&tr.images, tr.channels, size * size)?;
    let aug = Augmenter::new(stats.clone(), setup.train.flip_prob);
    let seed = setup.seed.wrapping_add(f as u64);
    let mut model = Model::build(setup.model, seed)?;
    let cfg = TrainConfig {
        seed: setup.train.seed.wrapping_add(f as u64),
        ..setup.train.clone()
    };
    let (best, history) = train(&mut model, &tr, &va, &aug, &cfg)?;
    let scores: Vec<f64> = predict(&best, &te, &aug, cfg.batch_size)?
        .into_iter()
        .map(f64::from)
        .collect();
    let labels: Vec<bool> = te.labels.iter().map(|&y| y > 0.5).collect();
    let (cm, image, roc) = evaluate(&scores, &labels)?;
    let (pcm, patient) = patient_level(&scores, &labels, &te.patients)?;
    if let Some(dir) = setup.out_dir {
        let fd = dir.join(format!("fold{f}"));
        write_string(&fd.join("history.csv"), &history.to_csv())?;
        write_string(&fd.join("metrics.csv"), &metrics_csv(&image, &patient))?;
        if let Some(curve) = &roc {
            write_string(&fd.join("roc.csv"), &roc_csv(curve))?;
        }
        best.save(&fd.join("checkpoint"))?;
    }
    Ok((
        FoldReport {
            fold: f,
            n_train: tr.len(),
            n_val: va.len(),
            n_test: te.len(),
            best_epoch: history.best_epoch,
            stop_reason: history.stop_reason,
            confusion: cm,
            image,
            patient_confusion: pcm,
            patient,
            norm: stats,
            roc,
            history,
        },
        best.count_params(),
    ))
}
