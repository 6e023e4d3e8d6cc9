//! Gradient audit: finite-difference checks over every primitive, every
//! composite block and both desk models.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, BnMode, Fault, GradCheckOptions, Graph, PoolMode, Program, Var};
use crate::error::Result;
use crate::models::{Backbone, Model, ModelConfig, ModelLoss};
use crate::nn::{
    check_layer, jitter, BatchNorm2d, BnReluConv, Builder, Conv2d, DenseBlock, DenseLayer, Layer, Linear, Mode,
    ParamStore, ResidualBlock, SeBlock, Spp, Transition,
};
use crate::tensor::{Scalar, Tensor};

/// Tolerance for ops that are linear in every checked input.
pub const LINEAR_TOL: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Primitive,
    Block,
    Model,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub kind: Kind,
    pub max_rel_error: f64,
    pub tol: f64,
    pub coords: usize,
    pub seconds: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    Conv2d,
    Conv2dStrided,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Spp,
    Add,
    Mul,
    Relu,
    Sigmoid,
    ScaleChannels,
    Affine,
    BatchNormTrain,
    BatchNormEval,
    Concat,
    Slice,
    Reshape,
    Sum,
    Mean,
    Bce,
}

const PRIMS: [(Prim, &str, f64); 20] = [
    (Prim::Conv2d, "conv2d", LINEAR_TOL),
    (Prim::Conv2dStrided, "conv2d (stride 2, bias)", LINEAR_TOL),
    (Prim::MaxPool, "max_pool2d", DEFAULT_TOL),
    (Prim::AvgPool, "avg_pool2d", LINEAR_TOL),
    (Prim::GlobalAvgPool, "global_avg_pool", LINEAR_TOL),
    (Prim::Spp, "spp", DEFAULT_TOL),
    (Prim::Add, "add", LINEAR_TOL),
    (Prim::Mul, "mul", DEFAULT_TOL),
    (Prim::Relu, "relu", DEFAULT_TOL),
    (Prim::Sigmoid, "sigmoid", DEFAULT_TOL),
    (Prim::ScaleChannels, "scale_channels", DEFAULT_TOL),
    (Prim::Affine, "linear", LINEAR_TOL),
    (Prim::BatchNormTrain, "batch_norm (train)", DEFAULT_TOL),
    (Prim::BatchNormEval, "batch_norm (eval)", DEFAULT_TOL),
    (Prim::Concat, "concat_channels", LINEAR_TOL),
    (Prim::Slice, "slice_channels", LINEAR_TOL),
    (Prim::Reshape, "reshape", LINEAR_TOL),
    (Prim::Sum, "sum", LINEAR_TOL),
    (Prim::Mean, "mean", LINEAR_TOL),
    (Prim::Bce, "bce", DEFAULT_TOL),
];

impl Prim {
    /// Checked inputs followed by constants. The last constant weights the
    /// output so that every coordinate carries a distinct gradient.
    fn fixture(self, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut n = |shape: &[usize], std: f32| Tensor::randn(shape.to_vec(), std, rng);
        match self {
            Prim::Conv2d => (vec![n(&[2, 2, 5, 5], 1.0), n(&[3, 2, 3, 3], 0.5)], vec![]),
            Prim::Conv2dStrided => (
                vec![n(&[1, 2, 6, 6], 1.0), n(&[2, 2, 3, 3], 0.5), n(&[2], 0.5)],
                vec![],
            ),
            Prim::MaxPool | Prim::AvgPool | Prim::Spp | Prim::GlobalAvgPool | Prim::Relu | Prim::Sigmoid => {
                (vec![n(&[2, 3, 6, 6], 1.0)], vec![])
            }
            Prim::Add | Prim::Mul => (vec![n(&[2, 3, 4, 4], 1.0), n(&[2, 3, 4, 4], 1.0)], vec![]),
            Prim::ScaleChannels => (vec![n(&[2, 3, 4, 4], 1.0), n(&[2, 3], 1.0)], vec![]),
            Prim::Affine => (vec![n(&[3, 5], 1.0), n(&[4, 5], 0.5), n(&[4], 0.5)], vec![]),
            Prim::BatchNormTrain | Prim::BatchNormEval => {
                let x = n(&[3, 2, 4, 4], 1.0);
                let gamma = n(&[2], 0.3);
                let gamma = Tensor::new([2], gamma.data().iter().map(|v| 1.0 + v).collect()).expect("shape");
                let beta = n(&[2], 0.5);
                let mean = n(&[2], 0.3);
                let var = Tensor::new([2], n(&[2], 0.3).data().iter().map(|v| v.exp()).collect()).expect("shape");
                (vec![x, gamma, beta], vec![mean, var])
            }
            Prim::Concat => (vec![n(&[2, 2, 3, 3], 1.0), n(&[2, 3, 3, 3], 1.0)], vec![]),
            Prim::Slice | Prim::Reshape | Prim::Sum | Prim::Mean => (vec![n(&[2, 4, 3, 3], 1.0)], vec![]),
            Prim::Bce => {
                let p = Tensor::uniform([4, 1], 0.05, 0.95, rng);
                let y = Tensor::new([4, 1], vec![1.0, 0.0, 1.0, 0.0]).expect("shape");
                (vec![p], vec![y])
            }
        }
    }

    fn op<T: Scalar>(self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        Ok(match self {
            Prim::Conv2d => g.conv2d(v[0], v[1], None, 1, 1)?,
            Prim::Conv2dStrided => g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?,
            Prim::MaxPool => g.pool2d(v[0], PoolMode::Max, 3, 2, 1)?,
            Prim::AvgPool => g.pool2d(v[0], PoolMode::Avg, 2, 2, 0)?,
            Prim::GlobalAvgPool => g.global_avg_pool(v[0])?,
            Prim::Spp => g.spp(v[0], &[1, 2, 4])?,
            Prim::Add => g.add(v[0], v[1])?,
            Prim::Mul => g.mul(v[0], v[1])?,
            Prim::Relu => g.relu(v[0]),
            Prim::Sigmoid => g.sigmoid(v[0]),
            Prim::ScaleChannels => g.scale_channels(v[0], v[1])?,
            Prim::Affine => g.affine(v[0], v[1], v[2])?,
            Prim::BatchNormTrain => g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0,
            Prim::BatchNormEval => {
                let mean = g.value(v[3]).data().to_vec();
                let var = g.value(v[4]).data().to_vec();
                let mode = BnMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                    eps: 1e-5,
                };
                g.batch_norm(v[0], v[1], v[2], mode)?.0
            }
            Prim::Concat => g.concat_channels(&[v[0], v[1]])?,
            Prim::Slice => g.slice_channels(v[0], 1, 2)?,
            Prim::Reshape => g.reshape(v[0], &[2, 36])?,
            Prim::Sum => g.sum(v[0]),
            Prim::Mean => g.mean(v[0]),
            Prim::Bce => {
                let labels = g.value(v[1]).clone();
                g.bce(v[0], &labels)?
            }
        })
    }

    fn checked_inputs(self) -> usize {
        match self {
            Prim::BatchNormTrain | Prim::BatchNormEval => 3,
            Prim::Bce => 1,
            _ => usize::MAX,
        }
    }
}

/// `Σ op(inputs) ⊙ r`, with `r` passed as the last constant.
struct Weighted(Prim);

impl Program for Weighted {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let (args, r) = vars.split_at(vars.len() - 1);
        let y = self.0.op(g, args)?;
        let shape = g.shape(y).to_vec();
        let r = g.reshape(r[0], &shape)?;
        let prod = g.mul(y, r)?;
        Ok(g.sum(prod))
    }
}

fn check_prim(prim: Prim, fault: Option<Fault>, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inputs, mut consts) = prim.fixture(&mut rng);
    let k = prim.checked_inputs().min(inputs.len());
    let extra: Vec<Tensor> = inputs.drain(k..).collect();
    consts.splice(0..0, extra);
    // dry run for the output length
    let mut g = Graph::<f32>::new();
    let mut vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    vars.extend(consts.iter().map(|t| g.input(t.clone())));
    let out = prim.op(&mut g, &vars)?;
    let r = Tensor::randn(vec![g.value(out).len()], 1.0, &mut rng);
    consts.push(r);
    let opts = GradCheckOptions {
        seed,
        fault,
        ..Default::default()
    };
    let rep = grad_check(&Weighted(prim), &inputs, &consts, opts)?;
    Ok((rep.max_rel_error, rep.coords_checked))
}

fn timed(name: &str, kind: Kind, tol: f64, f: impl FnOnce() -> Result<(f64, usize)>) -> Result<CheckRow> {
    let t = Instant::now();
    let (err, coords) = f()?;
    Ok(CheckRow {
        name: name.to_string(),
        kind,
        max_rel_error: err,
        tol,
        coords,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn block<L: Layer>(
    seed: u64,
    fault: Option<Fault>,
    x_shape: &[usize],
    mode: Mode,
    make: impl FnOnce(&mut Builder) -> Result<L>,
) -> Result<(f64, usize)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = make(&mut Builder::new(&mut store, &mut rng))?;
    jitter(&mut store, seed + 1);
    let x = Tensor::randn(x_shape.to_vec(), 1.0, &mut rng);
    let opts = GradCheckOptions {
        max_coords: Some(40),
        seed,
        fault,
        ..Default::default()
    };
    let rep = check_layer(&layer, &store, &x, mode, opts)?;
    Ok((rep.max_rel_error, rep.coords_checked))
}

/// End-to-end BCE check of a desk model with respect to every parameter
/// tensor and the input, sampling `coords` entries per tensor.
pub fn check_model(cfg: &ModelConfig, fault: Option<Fault>, coords: usize, seed: u64) -> Result<(f64, usize)> {
    let mut model = Model::build(cfg, seed)?;
    jitter(model.store_mut(), seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let s = cfg.input_size;
    let x = Tensor::randn(vec![2, cfg.in_channels, s, s], 1.0, &mut rng);
    let y = Tensor::new([2, 1], vec![1.0, 0.0])?;
    let mut inputs = model.store().params().to_vec();
    inputs.push(x);
    let opts = GradCheckOptions {
        max_coords: Some(coords),
        seed,
        fault,
        ..Default::default()
    };
    let prog = ModelLoss {
        model: &model,
        mode: Mode::Train,
    };
    let rep = grad_check(&prog, &inputs, &[y], opts)?;
    Ok((rep.max_rel_error, rep.coords_checked))
}

/// Runs the full audit. `fault` injects a deliberate backward bug.
pub fn gradcheck_suite(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, &(prim, name, tol)) in PRIMS.iter().enumerate() {
        rows.push(timed(name, Kind::Primitive, tol, || check_prim(prim, fault, 100 + i as u64))?);
    }
    let b = Kind::Block;
    rows.push(timed("Conv2d", b, LINEAR_TOL, || {
        block(1, fault, &[2, 3, 6, 6], Mode::Train, |b| Conv2d::new(b, 3, 4, 3, 1, 1))
    })?);
    rows.push(timed("BatchNorm2d (train)", b, DEFAULT_TOL, || {
        block(2, fault, &[3, 3, 4, 4], Mode::Train, |b| BatchNorm2d::new(b, 3))
    })?);
    rows.push(timed("BatchNorm2d (eval)", b, DEFAULT_TOL, || {
        block(3, fault, &[3, 3, 4, 4], Mode::Eval, |b| BatchNorm2d::new(b, 3))
    })?);
    rows.push(timed("Linear", b, LINEAR_TOL, || {
        block(4, fault, &[3, 6], Mode::Train, |b| Linear::new(b, 6, 2))
    })?);
    rows.push(timed("BnReluConv", b, DEFAULT_TOL, || {
        block(5, fault, &[2, 3, 5, 5], Mode::Train, |b| BnReluConv::new(b, 1, 3, 4, 3, 1))
    })?);
    rows.push(timed("SeBlock", b, DEFAULT_TOL, || {
        block(6, fault, &[2, 8, 4, 4], Mode::Train, |b| SeBlock::new(b, 8, 4))
    })?);
    rows.push(timed("Spp", b, DEFAULT_TOL, || {
        block(7, fault, &[2, 3, 8, 8], Mode::Train, |_| Spp::new(vec![1, 2, 4]))
    })?);
    rows.push(timed("DenseLayer", b, DEFAULT_TOL, || {
        block(8, fault, &[2, 4, 6, 6], Mode::Train, |b| DenseLayer::new(b, 4, 3))
    })?);
    rows.push(timed("DenseBlock", b, DEFAULT_TOL, || {
        block(9, fault, &[2, 4, 6, 6], Mode::Train, |b| DenseBlock::new(b, 4, 2, 3))
    })?);
    rows.push(timed("Transition", b, DEFAULT_TOL, || {
        block(10, fault, &[2, 6, 6, 6], Mode::Train, |b| Transition::new(b, 6))
    })?);
    rows.push(timed("ResidualBlock", b, DEFAULT_TOL, || {
        block(11, fault, &[2, 4, 6, 6], Mode::Train, |b| ResidualBlock::new(b, 4, 4, 1))
    })?);
    rows.push(timed("ResidualBlock (stride 2)", b, DEFAULT_TOL, || {
        block(12, fault, &[2, 4, 6, 6], Mode::Train, |b| ResidualBlock::new(b, 4, 6, 2))
    })?);
    for backbone in [Backbone::DenseNet, Backbone::ResNet18] {
        let cfg = ModelConfig::desk(backbone);
        rows.push(timed(&format!("desk {}", cfg.label()), Kind::Model, DEFAULT_TOL, || {
            check_model(&cfg, fault, 3, 13)
        })?);
    }
    Ok(rows)
}

pub fn report_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<44} {:<10} {:>12} {:>8} {:>7}  {}\n", "check", "kind", "max_rel_err", "tol", "coords", "result");
    for r in rows {
        let kind = match r.kind {
            Kind::Primitive => "primitive",
            Kind::Block => "block",
            Kind::Model => "model",
        };
        s.push_str(&format!(
            "{:<44} {:<10} {:>12.3e} {:>8.0e} {:>7}  {}\n",
            r.name,
            kind,
            r.max_rel_error,
            r.tol,
            r.coords,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for (i, &(prim, name, tol)) in PRIMS.iter().enumerate() {
            let (err, _) = check_prim(prim, None, 100 + i as u64).unwrap();
            assert!(err < tol, "{name}: {err}");
        }
    }

    #[test]
    fn flipped_conv_backward_is_caught() {
        let (err, _) = check_prim(Prim::Conv2d, Some(Fault::FlipConvBackward), 0).unwrap();
        assert!(err > 0.1);
        let (err, _) = check_prim(Prim::Relu, Some(Fault::FlipConvBackward), 0).unwrap();
        assert!(err < DEFAULT_TOL);
    }
}
