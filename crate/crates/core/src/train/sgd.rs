use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SgdParams {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// `g' = g + wd·w; v = μ·v + g'; w -= lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    hp: SgdParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape("sgd", "parameter, gradient and state counts differ"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::shape("sgd", format!("gradient shape mismatch for {}", names[i])));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("non-finite gradient for {}", names[i])));
            }
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let g = g.as_ref().map(Tensor::data);
        for (j, (w, vel)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            let grad = g.map_or(0.0, |g| g[j]) + hp.weight_decay * *w;
            *vel = hp.momentum * *vel + grad;
            *w -= hp.lr * *vel;
        }
    }
    Ok(())
}
