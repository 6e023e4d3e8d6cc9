use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: Option<f64>, b: f64, tol: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() < tol)
}

#[test]
fn confusion_examples() {
    let cm = confusion(&[0.9, 0.1], &[true, false], 0.5).unwrap();
    assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 0, tn: 1, fn_: 0 });
    let cm = confusion(&[0.5; 4], &[true, false, true, false], 0.5).unwrap();
    assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (2, 2, 0, 0));
    assert!(confusion(&[], &[], 0.5).is_err());
    assert!(confusion(&[0.1], &[true, false], 0.5).is_err());
}

#[test]
fn confusion_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s: Vec<f64> = (0..20).map(|_| rng.random()).collect();
    let y: Vec<bool> = (0..20).map(|_| rng.random()).collect();
    let cm = confusion(&s, &y, 0.5).unwrap();
    let mut c = [0usize; 4];
    for i in 0..20 {
        let p = s[i] >= 0.5;
        c[usize::from(p) * 2 + usize::from(y[i])] += 1;
    }
    assert_eq!([cm.tn, cm.fn_, cm.fp, cm.tp], c);
}

#[test]
fn metric_examples() {
    let m = metrics(&ConfusionMatrix { tp: 9, fn_: 1, tn: 9, fp: 1 }).unwrap();
    for v in &m.values()[..5] {
        assert!(close(*v, 0.9, 1e-12));
    }
    let m = metrics(&ConfusionMatrix { tp: 0, fn_: 3, tn: 5, fp: 0 }).unwrap();
    assert_eq!(m.ppv, None);
    assert!(close(m.accuracy, 5.0 / 8.0, 1e-12));
    let m = metrics(&ConfusionMatrix { tp: 86, fn_: 14, tn: 96, fp: 4 }).unwrap();
    assert!(close(m.accuracy, 0.91, 1e-12));
    assert!(close(m.sensitivity, 0.86, 1e-12));
    assert!(close(m.specificity, 0.96, 1e-12));
    assert!(close(m.ppv, 0.9556, 1e-4));
    assert!(close(m.npv, 0.8727, 1e-4));
    assert!(metrics(&ConfusionMatrix::default()).is_err());
}

#[test]
fn roc_examples() {
    let c = roc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
    assert!(c.points.contains(&(0.0, 1.0)));
    assert_eq!(c.points[0], (0.0, 0.0));
    assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
    assert!(c.thresholds[0].is_infinite());
    assert_eq!(auc(&c), 1.0);
    assert_eq!(auc_scores(&[0.9, 0.6, 0.4, 0.1], &[true, false, true, false]).unwrap(), 0.75);
    assert_eq!(auc_scores(&[0.3, 0.3], &[true, false]).unwrap(), 0.5);
    assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn roc_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s: Vec<f64> = (0..15).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
    let mut y: Vec<bool> = (0..15).map(|_| rng.random()).collect();
    y[0] = true;
    y[1] = false;
    let c = roc(&s, &y).unwrap();
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = 15.0 - pos;
    for (t, &(fpr, tpr)) in c.thresholds.iter().zip(&c.points) {
        let cm = confusion(&s, &y, *t).unwrap();
        assert_eq!(fpr, cm.fp as f64 / neg);
        assert_eq!(tpr, cm.tp as f64 / pos);
    }
    let mut uniq = s.clone();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    assert_eq!(c.thresholds.len(), uniq.len() + 1);
    assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1] != w[0]));
}

#[test]
fn random_labels_give_near_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: Vec<f64> = (0..4000).map(|_| rng.random()).collect();
    let y: Vec<bool> = (0..4000).map(|_| rng.random()).collect();
    let a = auc_scores(&s, &y).unwrap();
    assert!((a - 0.5).abs() < 0.05, "{a}");
}

#[test]
fn patient_vote_ties_are_positive() {
    let s = [0.9, 0.1, 0.2, 0.3, 0.8, 0.7];
    let y = [true, true, false, false, false, false];
    let p: Vec<String> = ["A", "A", "B", "B", "C", "C"].iter().map(|s| s.to_string()).collect();
    let (cm, m) = patient_level(&s, &y, &p).unwrap();
    // A ties 1-1 -> positive (tp); B negative (tn); C positive (fp)
    assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 0 });
    // A (0.5) beats B (0.25) and loses to C (0.75)
    assert_eq!(m.auc, Some(0.5));
}

#[test]
fn aggregate_mean_and_std() {
    let a = MetricSet { accuracy: Some(0.8), ppv: None, ..Default::default() };
    let b = MetricSet { accuracy: Some(0.6), ppv: Some(0.5), ..Default::default() };
    let (mean, std) = aggregate(&[a, b]);
    assert!(close(mean.accuracy, 0.7, 1e-12));
    assert!(close(std.accuracy, (0.02f64).sqrt(), 1e-12));
    assert_eq!(mean.ppv, Some(0.5));
    assert_eq!(mean.auc, None);
    assert_eq!(metric_json(None), serde_json::json!("n/a"));
    assert_eq!(metric_json(Some(0.12345678)), serde_json::json!(0.123457));
}

#[test]
fn csv_layouts() {
    let m = MetricSet { accuracy: Some(0.5), ..Default::default() };
    let csv = metrics_csv(&m, &m);
    assert!(csv.starts_with("metric,value\naccuracy,0.500000\nsensitivity,n/a\n"));
    assert_eq!(csv.lines().count(), 13);
    let c = roc(&[0.9, 0.1], &[true, false]).unwrap();
    assert_eq!(roc_csv(&c), "threshold,fpr,tpr\ninf,0.000000,0.000000\n0.900000,0.000000,1.000000\n0.100000,1.000000,1.000000\n");
}
