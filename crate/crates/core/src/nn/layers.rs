use super::params::{Builder, BufferId, Ctx, Mode, ParamId, StatUpdate, BN_EPS};
use crate::autodiff::{BnMode, Var};
use crate::error::Result;
use crate::tensor::Scalar;

/// Bias-free unless built with [`Conv2d::with_bias`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let weight = b.normal("weight", &[cout, cin, kernel, kernel], cin * kernel * kernel, 2.0)?;
        Ok(Conv2d {
            weight,
            bias: None,
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    pub fn with_bias(mut self, b: &mut Builder) -> Result<Self> {
        self.bias = Some(b.constant("bias", &[self.cout], 0.0)?);
        Ok(self)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let bias = self.bias.map(|b| ctx.p(b));
        ctx.g.conv2d(x, w, bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.constant("weight", &[channels], 1.0)?,
            beta: b.constant("bias", &[channels], 0.0)?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let mode = match ctx.mode {
            Mode::Train => BnMode::Train { eps: BN_EPS },
            Mode::Eval => BnMode::Eval {
                running_mean: ctx.buffer(self.running_mean),
                running_var: ctx.buffer(self.running_var),
                eps: BN_EPS,
            },
        };
        let (y, stats) = ctx.g.batch_norm(x, gamma, beta, mode)?;
        if let (Some(stats), true) = (stats, ctx.record_stats) {
            let cast = |v: Vec<T>| v.into_iter().map(|x| x.as_f64() as f32).collect();
            ctx.stats.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: crate::autodiff::BatchStats {
                    mean: cast(stats.mean),
                    var: cast(stats.var),
                },
            });
        }
        Ok(y)
    }
}

/// `y = x·Wᵀ + b` over `[B, N]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.normal("weight", &[fan_out, fan_in], fan_in, 1.0)?,
            bias: b.constant("bias", &[fan_out], 0.0)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.g.affine(x, w, b)
    }
}

/// BN, ReLU, conv.
#[derive(Clone, Debug)]
pub struct BnReluConv {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
}

impl BnReluConv {
    pub fn new(b: &mut Builder, idx: usize, cin: usize, cout: usize, kernel: usize, pad: usize) -> Result<Self> {
        Ok(BnReluConv {
            bn: BatchNorm2d::new(&mut b.scope(&format!("norm{idx}")), cin)?,
            conv: Conv2d::new(&mut b.scope(&format!("conv{idx}")), cin, cout, kernel, 1, pad)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(ctx, x)?;
        let y = ctx.g.relu(y);
        self.conv.forward(ctx, y)
    }
}
