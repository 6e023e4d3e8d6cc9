use super::layers::{BatchNorm2d, BnReluConv, Conv2d, Linear};
use super::params::{Builder, Ctx};
use crate::autodiff::{PoolMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const SE_REDUCTION: usize = 16;

/// Squeeze-and-excitation: global average pool, bottleneck, sigmoid gate,
/// per-channel rescale.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    /// Bottleneck width for `channels` at reduction `r`; `r` drops to
    /// `channels` when the map is narrower than `r`.
    pub fn hidden_width(channels: usize, r: usize) -> usize {
        let r = r.min(channels).max(1);
        (channels / r).max(1)
    }

    /// Learnable scalars added by one block.
    pub fn param_count(channels: usize, r: usize) -> usize {
        let h = Self::hidden_width(channels, r);
        2 * channels * h + channels + h
    }

    pub fn new(b: &mut Builder, channels: usize, r: usize) -> Result<Self> {
        if channels == 0 || r == 0 {
            return Err(Error::Config("SE block needs positive channels and reduction".into()));
        }
        let hidden = Self::hidden_width(channels, r);
        Ok(SeBlock {
            fc1: Linear::new(&mut b.scope("fc1"), channels, hidden)?,
            fc2: Linear::new(&mut b.scope("fc2"), hidden, channels)?,
            channels,
            hidden,
        })
    }

    /// Per-sample channel gates `[B, C]`, each in (0, 1).
    pub fn excitation<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.g.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(
                "se",
                format!("block built for {} channels, input {:?}", self.channels, ctx.g.shape(x)),
            ));
        }
        let z = ctx.g.global_avg_pool(x)?;
        let z = self.fc1.forward(ctx, z)?;
        let z = ctx.g.relu(z);
        let z = self.fc2.forward(ctx, z)?;
        Ok(ctx.g.sigmoid(z))
    }

    pub fn rescale<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, s: Var) -> Result<Var> {
        ctx.g.scale_channels(x, s)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = self.excitation(ctx, x)?;
        self.rescale(ctx, x, s)
    }
}

/// Max-pooling pyramid; output is `[B, C·Σb²]` whatever the input size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spp {
    pub bins: Vec<usize>,
}

impl Default for Spp {
    fn default() -> Self {
        Spp { bins: vec![1, 2, 4] }
    }
}

impl Spp {
    pub fn new(bins: Vec<usize>) -> Result<Self> {
        if bins.is_empty() || bins.contains(&0) {
            return Err(Error::Config(format!("invalid SPP bins {bins:?}")));
        }
        Ok(Spp { bins })
    }

    pub fn regions(&self) -> usize {
        self.bins.iter().map(|b| b * b).sum()
    }

    pub fn out_features(&self, channels: usize) -> usize {
        channels * self.regions()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.g.spp(x, &self.bins)
    }
}

/// Bottleneck layer: BN-ReLU-Conv1×1 to `4k`, then BN-ReLU-Conv3×3 to `k`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub bottleneck: BnReluConv,
    pub conv: BnReluConv,
}

impl DenseLayer {
    pub fn new(b: &mut Builder, cin: usize, growth: usize) -> Result<Self> {
        Ok(DenseLayer {
            bottleneck: BnReluConv::new(b, 1, cin, 4 * growth, 1, 0)?,
            conv: BnReluConv::new(b, 2, 4 * growth, growth, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bottleneck.forward(ctx, x)?;
        self.conv.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub cin: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(b: &mut Builder, cin: usize, num_layers: usize, growth: usize) -> Result<Self> {
        if num_layers == 0 || growth == 0 || cin == 0 {
            return Err(Error::Config("dense block needs positive layers, growth and width".into()));
        }
        let layers = (0..num_layers)
            .map(|i| DenseLayer::new(&mut b.scope(&format!("layer{}", i + 1)), cin + i * growth, growth))
            .collect::<Result<_>>()?;
        Ok(DenseBlock { layers, cin, growth })
    }

    pub fn out_channels(&self) -> usize {
        self.cin + self.layers.len() * self.growth
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let inp = if features.len() == 1 {
                x
            } else {
                ctx.g.concat_channels(&features)?
            };
            features.push(layer.forward(ctx, inp)?);
        }
        ctx.g.concat_channels(&features)
    }
}

/// BN-ReLU-Conv1×1 halving channels, then 2×2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    pub inner: BnReluConv,
    pub cin: usize,
    pub cout: usize,
}

impl Transition {
    pub fn new(b: &mut Builder, cin: usize) -> Result<Self> {
        let cout = cin / 2;
        if cout == 0 {
            return Err(Error::Config(format!("transition cannot halve {cin} channels")));
        }
        Ok(Transition {
            inner: BnReluConv::new(b, 1, cin, cout, 1, 0)?,
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        if s.len() == 4 && (!s[2].is_multiple_of(2) || !s[3].is_multiple_of(2)) {
            return Err(Error::shape(
                "transition",
                format!("spatial dims must be even, got {}x{}", s[2], s[3]),
            ));
        }
        let y = self.inner.forward(ctx, x)?;
        ctx.g.pool2d(y, PoolMode::Avg, 2, 2, 0)
    }
}

/// Basic two-conv residual block.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let shortcut = if stride > 1 || cin != cout {
            let mut d = b.scope("downsample");
            Some((
                Conv2d::new(&mut d.scope("conv"), cin, cout, 1, stride, 0)?,
                BatchNorm2d::new(&mut d.scope("norm"), cout)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1: Conv2d::new(&mut b.scope("conv1"), cin, cout, 3, stride, 1)?,
            bn1: BatchNorm2d::new(&mut b.scope("norm1"), cout)?,
            conv2: Conv2d::new(&mut b.scope("conv2"), cout, cout, 3, 1, 1)?,
            bn2: BatchNorm2d::new(&mut b.scope("norm2"), cout)?,
            shortcut,
            cin,
            cout,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let short = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.g.add(y, short)?;
        Ok(ctx.g.relu(sum))
    }
}
