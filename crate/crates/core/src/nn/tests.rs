use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{sigmoid, GradCheckOptions, Graph};
use crate::tensor::Tensor;

fn build<L>(seed: u64, f: impl FnOnce(&mut Builder) -> crate::Result<L>) -> (L, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = f(&mut Builder::new(&mut store, &mut rng)).unwrap();
    (layer, store)
}

fn run<L: Layer>(layer: &L, store: &ParamStore, x: &Tensor, mode: Mode) -> crate::Result<(Tensor, Vec<StatUpdate>)> {
    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let buffers = store.buffers_as::<f32>();
    let xv = g.input(x.clone());
    let mut ctx = Ctx::new(&mut g, &params, &buffers, mode);
    let y = layer.forward(&mut ctx, xv)?;
    let stats = std::mem::take(&mut ctx.stats);
    Ok((g.value(y).clone(), stats))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gc<L: Layer>(layer: &L, store: &ParamStore, x: &Tensor, mode: Mode) -> f64 {
    let mut store = store.clone();
    jitter(&mut store, 3);
    let store = &store;
    let opts = GradCheckOptions {
        max_coords: Some(40),
        ..Default::default()
    };
    check_layer(layer, store, x, mode, opts).unwrap().max_rel_error
}

#[test]
fn se_hidden_width_rule() {
    assert_eq!(SeBlock::hidden_width(64, 16), 4);
    assert_eq!(SeBlock::hidden_width(8, 16), 1);
    assert_eq!(SeBlock::hidden_width(40, 16), 2);
    assert_eq!(SeBlock::param_count(64, 16), 2 * 64 * 4 + 64 + 4);
    let (_, store) = build(0, |b| SeBlock::new(b, 40, 16));
    assert_eq!(store.count(), SeBlock::param_count(40, 16));
}

#[test]
fn se_zero_input_gives_zero() {
    let (se, store) = build(1, |b| SeBlock::new(b, 4, 16));
    let (y, _) = run(&se, &store, &Tensor::zeros(vec![2, 4, 3, 3]), Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_unit_scale_is_identity() {
    let (se, store) = build(2, |b| SeBlock::new(b, 3, 16));
    let x = randn(&[2, 3, 4, 4], 5);
    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let buffers = store.buffers_as::<f32>();
    let xv = g.input(x.clone());
    let ones = g.input(Tensor::ones(vec![2, 3]));
    let mut ctx = Ctx::new(&mut g, &params, &buffers, Mode::Eval);
    let y = se.rescale(&mut ctx, xv, ones).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn se_matches_four_step_oracle() {
    let (se, store) = build(3, |b| SeBlock::new(b, 2, 16));
    let x = randn(&[1, 2, 2, 2], 9);
    let (y, _) = run(&se, &store, &x, Mode::Eval).unwrap();
    let w1 = store.param(se.fc1.weight).data();
    let b1 = store.param(se.fc1.bias).data();
    let w2 = store.param(se.fc2.weight).data();
    let b2 = store.param(se.fc2.bias).data();
    let (c, h) = (2, se.hidden);
    let z: Vec<f64> = (0..c)
        .map(|ch| x.data()[ch * 4..ch * 4 + 4].iter().map(|&v| v as f64).sum::<f64>() / 4.0)
        .collect();
    let u: Vec<f64> = (0..h)
        .map(|j| (b1[j] as f64 + (0..c).map(|i| w1[j * c + i] as f64 * z[i]).sum::<f64>()).max(0.0))
        .collect();
    let s: Vec<f64> = (0..c)
        .map(|i| sigmoid(b2[i] as f64 + (0..h).map(|j| w2[i * h + j] as f64 * u[j]).sum::<f64>()))
        .collect();
    for (k, &v) in y.data().iter().enumerate() {
        let want = s[k / 4] * x.data()[k] as f64;
        assert!((v as f64 - want).abs() < 1e-5, "{v} vs {want}");
    }
}

#[test]
fn se_rejects_channel_mismatch() {
    let (se, store) = build(1, |b| SeBlock::new(b, 4, 16));
    assert!(run(&se, &store, &Tensor::zeros(vec![1, 3, 2, 2]), Mode::Eval).is_err());
}

#[test]
fn spp_length_is_size_independent() {
    let spp = Spp::default();
    let store = ParamStore::new();
    for s in [8, 16, 32, 224] {
        let (y, _) = run(&spp, &store, &randn(&[1, 3, s, s], s as u64), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 63]);
    }
    assert_eq!(spp.out_features(3), 63);
}

#[test]
fn spp_single_bin_is_global_max() {
    let mut x = Tensor::zeros(vec![1, 1, 5, 5]);
    x.data_mut()[13] = 7.5;
    x.data_mut()[2] = -1.0;
    let spp = Spp::new(vec![1]).unwrap();
    let (y, _) = run(&spp, &ParamStore::new(), &x, Mode::Eval).unwrap();
    assert_eq!(y.data(), &[7.5]);
}

#[test]
fn spp_two_bins_match_quadrant_scan() {
    let x = randn(&[1, 1, 4, 4], 21);
    let spp = Spp::new(vec![2]).unwrap();
    let (y, _) = run(&spp, &ParamStore::new(), &x, Mode::Eval).unwrap();
    let d = x.data();
    for qy in 0..2 {
        for qx in 0..2 {
            let mut m = f32::NEG_INFINITY;
            for yy in 2 * qy..2 * qy + 2 {
                for xx in 2 * qx..2 * qx + 2 {
                    m = m.max(d[yy * 4 + xx]);
                }
            }
            assert_eq!(y.data()[qy * 2 + qx], m);
        }
    }
}

#[test]
fn spp_too_small_names_level() {
    let err = run(&Spp::default(), &ParamStore::new(), &randn(&[1, 1, 3, 3], 0), Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("4 bins"), "{err}");
}

#[test]
fn dense_block_channel_law() {
    for (c, l, k, want) in [(4, 1, 2, 6), (8, 4, 3, 20)] {
        let (blk, store) = build(0, |b| DenseBlock::new(b, c, l, k));
        assert_eq!(blk.out_channels(), want);
        let (y, _) = run(&blk, &store, &randn(&[2, c, 4, 4], 1), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, want, 4, 4]);
    }
}

#[test]
fn dense_block_matches_manual_unrolling() {
    let (blk, store) = build(4, |b| DenseBlock::new(b, 3, 2, 2));
    let x = randn(&[2, 3, 4, 4], 8);
    let (y, _) = run(&blk, &store, &x, Mode::Train).unwrap();

    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let buffers = store.buffers_as::<f32>();
    let xv = g.input(x);
    let mut ctx = Ctx::new(&mut g, &params, &buffers, Mode::Train);
    let f1 = blk.layers[0].forward(&mut ctx, xv).unwrap();
    let cat = ctx.g.concat_channels(&[xv, f1]).unwrap();
    let f2 = blk.layers[1].forward(&mut ctx, cat).unwrap();
    let out = ctx.g.concat_channels(&[xv, f1, f2]).unwrap();
    assert_eq!(g.value(out), &y);
}

#[test]
fn transition_shapes() {
    let (t, store) = build(0, |b| Transition::new(b, 64));
    let (y, _) = run(&t, &store, &randn(&[2, 64, 8, 8], 0), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 32, 4, 4]);
    let (t, store) = build(0, |b| Transition::new(b, 7));
    let (y, _) = run(&t, &store, &randn(&[2, 7, 4, 4], 0), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 3, 2, 2]);
    assert!(run(&t, &store, &randn(&[2, 7, 5, 4], 0), Mode::Train).is_err());
}

#[test]
fn transition_pool_is_window_mean() {
    let (t, store) = build(6, |b| Transition::new(b, 4));
    let x = randn(&[1, 4, 4, 4], 3);
    let (y, _) = run(&t, &store, &x, Mode::Train).unwrap();
    let (pre, _) = run(&t.inner, &store, &x, Mode::Train).unwrap();
    let p = pre.data();
    for c in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                let at = |yy: usize, xx: usize| p[c * 16 + yy * 4 + xx];
                let m = (at(2 * oy, 2 * ox) + at(2 * oy, 2 * ox + 1) + at(2 * oy + 1, 2 * ox) + at(2 * oy + 1, 2 * ox + 1)) / 4.0;
                assert!((y.data()[c * 4 + oy * 2 + ox] - m).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn residual_zero_weights_is_relu() {
    let (blk, mut store) = build(0, |b| ResidualBlock::new(b, 3, 3, 1));
    assert!(blk.shortcut.is_none());
    for id in [blk.conv1.weight, blk.conv2.weight] {
        let shape = store.param(id).shape().to_vec();
        let name = store.param_names()[store.params().iter().position(|p| std::ptr::eq(p, store.param(id))).unwrap()].clone();
        store.set(&name, Tensor::zeros(shape)).unwrap();
    }
    let x = randn(&[2, 3, 4, 4], 2);
    let (y, _) = run(&blk, &store, &x, Mode::Train).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, b.max(0.0));
    }
}

#[test]
fn residual_zero_input_matches_manual_composition() {
    let (blk, mut store) = build(5, |b| ResidualBlock::new(b, 2, 4, 2));
    store.set("norm2.bias", Tensor::new(vec![4], vec![0.5, -0.25, 1.0, 0.0]).unwrap()).unwrap();
    store.set("downsample.norm.bias", Tensor::new(vec![4], vec![0.1, 0.2, -2.0, 0.3]).unwrap()).unwrap();
    let x = Tensor::zeros(vec![1, 2, 4, 4]);
    let (y, _) = run(&blk, &store, &x, Mode::Train).unwrap();
    assert_eq!(y.shape(), &[1, 4, 2, 2]);
    // zero input: every conv output is 0, so each BN emits its bias
    let want = [0.6f32, -0.05, -1.0, 0.3];
    for (i, &v) in y.data().iter().enumerate() {
        assert!((v - want[i / 4].max(0.0)).abs() < 1e-6, "{i}: {v}");
    }
}

#[test]
fn residual_stride_two_halves() {
    let (blk, store) = build(0, |b| ResidualBlock::new(b, 4, 8, 2));
    assert!(blk.shortcut.is_some());
    let (y, _) = run(&blk, &store, &randn(&[2, 4, 8, 6], 0), Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 8, 4, 3]);
}

#[test]
fn eval_forward_is_pure() {
    let (blk, store) = build(3, |b| DenseBlock::new(b, 4, 2, 3));
    let before = store.clone();
    let x = randn(&[2, 4, 4, 4], 1);
    let (a, sa) = run(&blk, &store, &x, Mode::Eval).unwrap();
    let (b, sb) = run(&blk, &store, &x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert!(sa.is_empty() && sb.is_empty());
    assert_eq!(store, before);
}

#[test]
fn running_stats_follow_momentum() {
    let (bn, mut store) = build(0, |b| BatchNorm2d::new(b, 1));
    let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
    let (_, stats) = run(&bn, &store, &x, Mode::Train).unwrap();
    store.apply_stats(&stats);
    assert!((store.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-7);
    // unbiased variance of {1,3} is 2
    assert!((store.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-6);
}

#[test]
fn duplicate_names_rejected() {
    let mut store = ParamStore::new();
    store.add_param("a", Tensor::zeros(vec![1])).unwrap();
    assert!(store.add_buffer("a", Tensor::zeros(vec![1])).is_err());
}

#[test]
fn layers_pass_gradcheck() {
    let x = randn(&[2, 4, 4, 4], 11);
    for mode in [Mode::Train, Mode::Eval] {
        let (l, s) = build(1, |b| Conv2d::new(b, 4, 3, 3, 1, 1));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
        let (l, s) = build(1, |b| BatchNorm2d::new(b, 4));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
        let (l, s) = build(1, |b| SeBlock::new(b, 4, 2));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
        let (l, s) = build(1, |b| DenseBlock::new(b, 4, 2, 2));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
        let (l, s) = build(1, |b| Transition::new(b, 4));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
        let (l, s) = build(1, |b| ResidualBlock::new(b, 4, 6, 2));
        { let e = gc(&l, &s, &x, mode); assert!(e < 1e-3, "{mode:?} {e}"); }
    }
    let e = gc(&Spp::default(), &ParamStore::new(), &x, Mode::Eval);
    assert!(e < 1e-3, "{e}");
    let (l, s) = build(1, |b| Linear::new(b, 5, 3));
    assert!(gc(&l, &s, &randn(&[2, 5], 4), Mode::Eval) < 1e-6);
}


