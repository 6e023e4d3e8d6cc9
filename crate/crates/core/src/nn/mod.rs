//! Layers built on the autodiff graph.
//!
//! Parameters live in a [`ParamStore`]; layers only hold ids into it. A
//! forward pass binds the store to graph leaves and threads a [`Ctx`]
//! through the layers, so the same layer code runs in `f32` for training and
//! in `f64` for gradient checks.

mod blocks;
mod check;
mod layers;
mod params;

pub use blocks::{DenseBlock, DenseLayer, ResidualBlock, SeBlock, Spp, Transition, SE_REDUCTION};
pub use check::{check_layer, jitter, Layer};
pub use layers::{BatchNorm2d, BnReluConv, Conv2d, Linear};
pub use params::{Builder, BufferId, Ctx, Mode, ParamId, ParamStore, StatUpdate, BN_EPS, BN_MOMENTUM};

#[cfg(test)]
mod tests;
