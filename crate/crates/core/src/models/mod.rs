//! Full classifiers: DenseNet or ResNet18 backbones with optional SE blocks
//! and an optional SPP head, ending in one logit.

mod checkpoint;
mod config;

pub use config::{Backbone, ModelConfig, Preset};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, PoolMode, Program, Var};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Builder, Conv2d, Ctx, DenseBlock, Linear, Mode, ParamStore, ResidualBlock, SeBlock, Spp,
    StatUpdate, Transition,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: bool,
}

#[derive(Clone, Debug)]
struct DenseStage {
    block: DenseBlock,
    se: Option<SeBlock>,
    transition: Option<Transition>,
}

#[derive(Clone, Debug)]
struct ResStage {
    block: ResidualBlock,
    se: Option<SeBlock>,
}

#[derive(Clone, Debug)]
enum Body {
    Dense { stages: Vec<DenseStage>, norm: BatchNorm2d },
    Res { blocks: Vec<ResStage> },
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stem: Stem,
    body: Body,
    spp: Option<Spp>,
    fc: Linear,
    feature_channels: usize,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let paper = config.scale_preset == Preset::Paper;
        let (k, stride, pad) = if paper { (7, 2, 3) } else { (3, 1, 1) };
        let width = config.init_features;
        let stem = {
            let mut f = b.scope("features");
            Stem {
                conv: Conv2d::new(&mut f.scope("conv0"), config.in_channels, width, k, stride, pad)?,
                bn: BatchNorm2d::new(&mut f.scope("norm0"), width)?,
                pool: paper,
            }
        };
        let se = |b: &mut Builder, i: usize, c: usize| -> Result<Option<SeBlock>> {
            if config.use_se {
                Ok(Some(SeBlock::new(&mut b.scope(&format!("se{i}")), c, config.se_reduction)?))
            } else {
                Ok(None)
            }
        };
        let (body, feature_channels) = match config.backbone {
            Backbone::DenseNet => {
                let mut f = b.scope("features");
                let mut c = width;
                let mut stages = Vec::new();
                let n = config.block_config.len();
                for (i, &layers) in config.block_config.iter().enumerate() {
                    let block = DenseBlock::new(
                        &mut f.scope(&format!("denseblock{}", i + 1)),
                        c,
                        layers,
                        config.growth_rate,
                    )?;
                    c = block.out_channels();
                    let se = se(&mut f, i + 1, c)?;
                    let transition = if i + 1 < n {
                        let t = Transition::new(&mut f.scope(&format!("transition{}", i + 1)), c)?;
                        c = t.cout;
                        Some(t)
                    } else {
                        None
                    };
                    stages.push(DenseStage { block, se, transition });
                }
                let norm = BatchNorm2d::new(&mut f.scope(&format!("norm{}", n + 1)), c)?;
                (Body::Dense { stages, norm }, c)
            }
            Backbone::ResNet18 => {
                let mut c = width;
                let mut blocks = Vec::new();
                for (s, &count) in config.block_config.iter().enumerate() {
                    let cout = width << s;
                    for j in 0..count {
                        let stride = if s > 0 && j == 0 { 2 } else { 1 };
                        let mut l = b.scope(&format!("layer{}", s + 1));
                        let mut lb = l.scope(&format!("block{}", j + 1));
                        let block = ResidualBlock::new(&mut lb, c, cout, stride)?;
                        let se = se(&mut lb, 1, cout)?;
                        blocks.push(ResStage { block, se });
                        c = cout;
                    }
                }
                (Body::Res { blocks }, c)
            }
        };
        let spp = if config.use_spp {
            Some(Spp::new(config.spp_bins.clone())?)
        } else {
            None
        };
        let head_in = spp.as_ref().map_or(feature_channels, |s| s.out_features(feature_channels));
        let fc = Linear::new(&mut b.scope("classifier"), head_in, 1)?;
        Ok(Model {
            config: config.clone(),
            store,
            stem,
            body,
            spp,
            fc,
            feature_channels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Channels of the final feature map, before pooling.
    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    /// Input widths of every SE block, in forward order.
    pub fn se_channels(&self) -> Vec<usize> {
        let se: Vec<&SeBlock> = match &self.body {
            Body::Dense { stages, .. } => stages.iter().filter_map(|s| s.se.as_ref()).collect(),
            Body::Res { blocks } => blocks.iter().filter_map(|s| s.se.as_ref()).collect(),
        };
        se.iter().map(|s| s.channels).collect()
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::shape("model", format!("expected [B,C,H,W], got {shape:?}")));
        }
        let c = shape[1];
        if c != self.config.in_channels {
            if (1..=2).contains(&c) {
                return Err(Error::Modality {
                    expected: self.config.in_channels,
                    got: c,
                });
            }
            return Err(Error::shape(
                "model",
                format!("expected {} channels, got {c}", self.config.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if !self.config.use_spp && (h != self.config.input_size || w != self.config.input_size) {
            return Err(Error::shape(
                "model",
                format!(
                    "without SPP the input must be {0}x{0}, got {h}x{w}",
                    self.config.input_size
                ),
            ));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(Error::shape("model", format!("input {h}x{w} below minimum {min}x{min}")));
        }
        Ok(())
    }

    /// Records the network on `ctx.g` and returns logits `[B, 1]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check_input(ctx.g.shape(x))?;
        let mut y = self.stem.conv.forward(ctx, x)?;
        y = self.stem.bn.forward(ctx, y)?;
        y = ctx.g.relu(y);
        if self.stem.pool {
            y = ctx.g.pool2d(y, PoolMode::Max, 3, 2, 1)?;
        }
        match &self.body {
            Body::Dense { stages, norm } => {
                for s in stages {
                    y = s.block.forward(ctx, y)?;
                    if let Some(se) = &s.se {
                        y = se.forward(ctx, y)?;
                    }
                    if let Some(t) = &s.transition {
                        y = t.forward(ctx, y)?;
                    }
                }
                y = norm.forward(ctx, y)?;
                y = ctx.g.relu(y);
            }
            Body::Res { blocks } => {
                for s in blocks {
                    y = s.block.forward(ctx, y)?;
                    if let Some(se) = &s.se {
                        y = se.forward(ctx, y)?;
                    }
                }
            }
        }
        let pooled = match &self.spp {
            Some(spp) => spp.forward(ctx, y)?,
            None => ctx.g.global_avg_pool(y)?,
        };
        self.fc.forward(ctx, pooled)
    }

    /// Forward pass on a fresh graph with untracked parameters.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<StatUpdate>)> {
        let mut g = Graph::new();
        let params = self.store.bind(&mut g, false);
        let buffers = self.store.buffers_as::<f32>();
        let xv = g.input(x.clone());
        let mut ctx = Ctx::new(&mut g, &params, &buffers, mode);
        let y = self.forward(&mut ctx, xv)?;
        let stats = std::mem::take(&mut ctx.stats);
        let out = g.value(y).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("model produced non-finite logits".into()));
        }
        Ok((out, stats))
    }

    /// Eval-mode sigmoid probabilities `[B, 1]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let (mut logits, _) = self.logits(x, Mode::Eval)?;
        logits
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = crate::autodiff::sigmoid(*v));
        Ok(logits)
    }
}

/// Mean BCE of the model's probabilities, as a replayable program.
///
/// Inputs are the model parameters in store order; constants are the batch
/// and the `[B, 1]` labels.
pub struct ModelLoss<'a> {
    pub model: &'a Model,
    pub mode: Mode,
}

impl Program for ModelLoss<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let np = self.model.store.params().len();
        let buffers = self.model.store.buffers_as::<T>();
        let (params, rest) = vars.split_at(np);
        let labels = g.value(rest[1]).clone();
        let mut ctx = Ctx::new(g, params, &buffers, self.mode);
        let logits = self.model.forward(&mut ctx, rest[0])?;
        let p = ctx.g.sigmoid(logits);
        ctx.g.bce(p, &labels)
    }
}
