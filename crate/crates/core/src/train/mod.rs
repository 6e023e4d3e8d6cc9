//! SGD with momentum and weight decay on BCE, reduce-on-plateau learning
//! rate, early stopping, best-validation checkpoint.

mod schedule;
mod sgd;

pub use schedule::{early_stop_check, plateau_update, Schedule, Step, IMPROVE_TOL};
pub use sgd::{sgd_step, OptimizerState, SgdParams};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Augmenter, Dataset};
use crate::error::{Error, Result};
use crate::models::{Backbone, Model, Preset};
use crate::nn::{Ctx, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(backbone: Backbone, preset: Preset) -> Self {
        let batch_size = match (preset, backbone) {
            (Preset::Desk, _) => 16,
            (Preset::Paper, Backbone::DenseNet) => 48,
            (Preset::Paper, Backbone::ResNet18) => 64,
        };
        TrainConfig {
            epochs: 50,
            lr0: 0.01,
            batch_size,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_patience: 10,
            plateau_factor: 0.1,
            early_stop_patience: 20,
            flip_prob: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr0 > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return bad("lr0 must be positive; momentum and weight_decay non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.plateau_patience >= self.early_stop_patience {
            return bad("need 0 < plateau_patience < early_stop_patience");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,lr` with six decimals (lr in full).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.6},{:.6},{:e}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        s
    }
}

/// Mean binary cross-entropy of probabilities, clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probas: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probas.clone());
    let loss = g.bce(p, labels)?;
    Ok(g.value(loss).data()[0] as f64)
}

/// Eval-mode probabilities for every slice of `ds`, normalized but never flipped.
pub fn predict(model: &Model, ds: &Dataset, aug: &Augmenter, batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (mut x, _) = ds.batch(chunk);
        aug.eval_batch(&mut x);
        out.extend_from_slice(model.predict_proba(&x)?.data());
    }
    Ok(out)
}

fn eval_loss(model: &Model, ds: &Dataset, aug: &Augmenter, batch_size: usize) -> Result<f64> {
    let p = predict(model, ds, aug, batch_size)?;
    let n = p.len();
    bce_loss(
        &Tensor::new(vec![n, 1], p)?,
        &Tensor::new(vec![n, 1], ds.labels.clone())?,
    )
}

/// One forward/backward pass on a batch; returns the loss and per-parameter gradients.
pub fn loss_and_grads(model: &Model, x: Tensor, y: &Tensor) -> Result<(f64, Vec<Option<Tensor>>, Vec<crate::nn::StatUpdate>)> {
    let mut g = Graph::new();
    let params = model.store().bind(&mut g, true);
    let buffers = model.store().buffers_as::<f32>();
    let xv = g.input(x);
    let mut ctx = Ctx::new(&mut g, &params, &buffers, Mode::Train);
    let logits = model.forward(&mut ctx, xv)?;
    let stats = std::mem::take(&mut ctx.stats);
    let p = g.sigmoid(logits);
    let loss = g.bce(p, y)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss is not finite".into()));
    }
    let mut grads = g.backward(loss)?;
    Ok((value, params.iter().map(|&v| grads.take(v)).collect(), stats))
}

/// Trains `model` in place and returns the best-validation snapshot.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    aug: &Augmenter,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data("training and validation subsets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.store().params());
    let mut sched = Schedule::new(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience);
    let names = model.store().param_names().to_vec();
    let mut best = model.clone();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::Completed,
    };
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = train_ds.batch(chunk);
            aug.train_batch(&mut x, &mut rng);
            let (loss, grads, stats) = loss_and_grads(model, x, &y)?;
            total += loss * chunk.len() as f64;
            let hp = SgdParams {
                lr: lr as f32,
                momentum: cfg.momentum as f32,
                weight_decay: cfg.weight_decay as f32,
            };
            sgd_step(model.store_mut().params_mut(), &names, &grads, &mut state, hp)?;
            model.store_mut().apply_stats(&stats);
        }
        let train_loss = total / train_ds.len() as f64;
        let val_loss = eval_loss(model, val_ds, aug, cfg.batch_size)?;
        let step = sched.observe(val_loss);
        if step.improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if step.stop {
            history.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests;
