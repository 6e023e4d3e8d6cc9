use super::*;
use crate::data::{generate_cohort, CohortSpec, Modality, NormStats};
use crate::models::ModelConfig;

fn one(v: f32) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

fn step(w: &mut Tensor, g: f32, state: &mut OptimizerState, lr: f32, momentum: f32, wd: f32) {
    let mut p = [w.clone()];
    sgd_step(
        &mut p,
        &["w".to_string()],
        &[Some(one(g))],
        state,
        SgdParams { lr, momentum, weight_decay: wd },
    )
    .unwrap();
    *w = p[0].clone();
}

#[test]
fn sgd_hand_traces() {
    let mut w = one(1.0);
    let mut st = OptimizerState::new(&[w.clone()]);
    step(&mut w, 0.5, &mut st, 0.1, 0.0, 0.0);
    assert!((w.data()[0] - 0.95).abs() < 1e-7);

    let mut w = one(1.0);
    let mut st = OptimizerState { velocity: vec![vec![1.0]] };
    step(&mut w, 0.0, &mut st, 0.1, 0.9, 0.0);
    assert!((st.velocity[0][0] - 0.9).abs() < 1e-7);
    assert!((w.data()[0] - 0.91).abs() < 1e-7);

    let mut w = one(0.0);
    let mut st = OptimizerState::new(&[w.clone()]);
    step(&mut w, 1.0, &mut st, 0.1, 0.9, 0.0);
    assert!((w.data()[0] + 0.1).abs() < 1e-7);
    step(&mut w, 1.0, &mut st, 0.1, 0.9, 0.0);
    assert!((w.data()[0] + 0.29).abs() < 1e-6);
}

#[test]
fn sgd_rejects_nan_by_name() {
    let mut p = [one(1.0)];
    let mut st = OptimizerState::new(&p);
    let err = sgd_step(
        &mut p,
        &["features.conv0.weight".to_string()],
        &[Some(one(f32::NAN))],
        &mut st,
        SgdParams { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
    )
    .unwrap_err();
    assert!(err.to_string().contains("features.conv0.weight"), "{err}");
    assert_eq!(p[0].data()[0], 1.0);
}

#[test]
fn weight_decay_alone_shrinks_norm() {
    let mut p = [Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let mut st = OptimizerState::new(&p);
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f32>();
    let mut last = norm(&p[0]);
    for _ in 0..30 {
        sgd_step(
            &mut p,
            &["w".into()],
            &[None],
            &mut st,
            SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 1e-2 },
        )
        .unwrap();
        let n = norm(&p[0]);
        assert!(n < last);
        last = n;
    }
}

#[test]
fn bce_values() {
    let p = Tensor::new(vec![2, 1], vec![0.9, 0.2]).unwrap();
    let y = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    assert!((bce_loss(&p, &y).unwrap() - 0.164252).abs() < 1e-6);
    let half = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let pos = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    assert!((bce_loss(&half, &pos).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(bce_loss(&half, &Tensor::new(vec![1, 1], vec![0.3]).unwrap()).is_err());
}

#[test]
fn plateau_cases() {
    let decreasing: Vec<f64> = (0..50).map(|i| 1.0 - i as f64 * 0.01).collect();
    assert_eq!(plateau_update(&decreasing, 0.01, 10, 0.1), 0.01);
    let flat = vec![1.0; 22];
    assert_eq!(plateau_update(&flat[..10], 0.01, 10, 0.1), 0.01);
    assert!((plateau_update(&flat[..11], 0.01, 10, 0.1) - 0.001).abs() < 1e-12);
    assert!((plateau_update(&flat, 0.01, 10, 0.1) - 0.0001).abs() < 1e-12);
}

#[test]
fn early_stop_cases() {
    let flat = vec![1.0; 21];
    assert!(!early_stop_check(&flat[..20], 20));
    assert!(early_stop_check(&flat, 20));
    let mut late = flat.clone();
    late[19] = 0.5;
    assert!(!early_stop_check(&late, 20));
    // improves every 19 epochs
    let saw: Vec<f64> = (0..200).map(|e| 10.0 - (e / 19) as f64).collect();
    for n in 1..=200 {
        assert!(!early_stop_check(&saw[..n], 20));
    }
}

fn tiny_data(signal: f64) -> (Dataset, Dataset, Augmenter) {
    let spec = CohortSpec {
        n_resistant: 8,
        n_sensitive: 8,
        slices_min: 1,
        slices_max: 1,
        image_size: 16,
        class_signal: signal,
        seed: 3,
    };
    let recs = generate_cohort(&spec).unwrap();
    let ids: Vec<&str> = recs.iter().map(|r| r.patient_id.as_str()).collect();
    let tr = Dataset::build(&recs, &ids[..12], 16, Modality::Multimodal).unwrap();
    let va = Dataset::build(&recs, &ids[12..], 16, Modality::Multimodal).unwrap();
    let aug = Augmenter::new(NormStats::fit(&tr.images, 2, 256).unwrap(), 0.5);
    (tr, va, aug)
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: 16,
        ..ModelConfig::desk(Backbone::DenseNet)
    };
    Model::build(&cfg, seed).unwrap()
}

#[test]
fn small_step_decreases_loss() {
    let (tr, _, aug) = tiny_data(1.0);
    for seed in 0..5 {
        let mut model = tiny_model(seed);
        let (mut x, y) = tr.batch(&[0, 1, 2, 3, 4, 5]);
        aug.eval_batch(&mut x);
        let (before, grads, _) = loss_and_grads(&model, x.clone(), &y).unwrap();
        let names = model.store().param_names().to_vec();
        let mut st = OptimizerState::new(model.store().params());
        let hp = SgdParams { lr: 1e-4, momentum: 0.9, weight_decay: 1e-4 };
        sgd_step(model.store_mut().params_mut(), &names, &grads, &mut st, hp).unwrap();
        let (after, _, _) = loss_and_grads(&model, x, &y).unwrap();
        assert!(after < before, "seed {seed}: {after} !< {before}");
    }
}

#[test]
fn training_smoke_run() {
    let (tr, va, aug) = tiny_data(1.0);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 4,
        ..TrainConfig::preset(Backbone::DenseNet, Preset::Desk)
    };
    let mut m = tiny_model(1);
    let calls_before = aug.flip_calls();
    let (best, hist) = train(&mut m, &tr, &va, &aug, &cfg).unwrap();
    assert_eq!(hist.epochs.len(), 10);
    // exactly one flip call per training batch, none for validation
    assert_eq!(aug.flip_calls() - calls_before, 10 * tr.len().div_ceil(4));
    assert!(hist.epochs[9].train_loss < hist.epochs[0].train_loss);
    let best_val = hist.epochs[hist.best_epoch - 1].val_loss;
    assert!(hist.epochs.iter().all(|e| best_val <= e.val_loss));
    assert!(hist.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    // the returned snapshot reproduces the best epoch's validation loss
    let p = predict(&best, &va, &aug, 4).unwrap();
    let n = p.len();
    let loss = bce_loss(&Tensor::new(vec![n, 1], p).unwrap(), &Tensor::new(vec![n, 1], va.labels.clone()).unwrap()).unwrap();
    assert!((loss - best_val).abs() < 1e-9);

    let mut m2 = tiny_model(1);
    let (_, hist2) = train(&mut m2, &tr, &va, &aug, &cfg).unwrap();
    assert_eq!(hist.to_csv(), hist2.to_csv());
}
