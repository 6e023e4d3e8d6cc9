use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, Mode, ParamStore};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Program, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Anything with a single-input forward pass.
pub trait Layer {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var>;
}

macro_rules! impl_layer {
    ($($t:ty),*) => {$(
        impl Layer for $t {
            fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
                <$t>::forward(self, ctx, x)
            }
        }
    )*};
}

impl_layer!(
    super::Conv2d,
    super::BatchNorm2d,
    super::Linear,
    super::BnReluConv,
    super::SeBlock,
    super::Spp,
    super::DenseLayer,
    super::DenseBlock,
    super::Transition,
    super::ResidualBlock
);

/// `loss = Σ layer(x) ⊙ r` with a fixed random `r`, so normalized outputs
/// still carry a gradient.
struct Probe<'a, L> {
    layer: &'a L,
    store: &'a ParamStore,
    mode: Mode,
}

impl<L: Layer> Program for Probe<'_, L> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let np = self.store.params().len();
        let buffers = self.store.buffers_as::<T>();
        let (params, rest) = vars.split_at(np);
        let mut ctx = Ctx::new(g, params, &buffers, self.mode);
        let y = self.layer.forward(&mut ctx, rest[0])?;
        let r = ctx.g.reshape(rest[1], ctx.g.shape(y).to_vec().as_slice())?;
        let prod = ctx.g.mul(y, r)?;
        Ok(ctx.g.sum(prod))
    }
}

/// Checks gradients with respect to every parameter and the input.
pub fn check_layer<L: Layer>(
    layer: &L,
    store: &ParamStore,
    x: &Tensor,
    mode: Mode,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let probe = Probe { layer, store, mode };
    // output shape via a dry run
    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let buffers = store.buffers_as::<f32>();
    let xv = g.input(x.clone());
    let out_len = {
        let mut ctx = Ctx::new(&mut g, &params, &buffers, mode);
        let y = layer.forward(&mut ctx, xv)?;
        ctx.g.value(y).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let r = Tensor::randn(vec![out_len], 1.0, &mut rng);
    let mut inputs = store.params().to_vec();
    inputs.push(x.clone());
    grad_check(&probe, &inputs, &[r], opts)
}

/// Moves biases, batch-norm affine terms and running statistics off their
/// initial constants. Fresh zeros put ReLUs exactly on their kink.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.named_tensors().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = store.get(&name).expect("listed name").clone();
        let noise = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
        let moved: Vec<f32> = if name.ends_with("running_var") {
            t.data().iter().zip(noise.data()).map(|(v, n)| v * n.exp()).collect()
        } else if name.ends_with("bias") || name.ends_with("running_mean") || name.contains(".norm") || name.starts_with("norm") {
            t.data().iter().zip(noise.data()).map(|(v, n)| v + n).collect()
        } else {
            continue;
        };
        store
            .set(&name, Tensor::new(t.shape().to_vec(), moved).expect("same shape"))
            .expect("same shape");
    }
}
