//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Graph`] is a tape: each primitive records its output and whatever it
//! needs for its backward rule, and is dropped once gradients are read.
//! Conventions: `relu'(0) = 0`, and max pooling sends gradient to the first
//! maximum in row-major order.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, rel_error, GradCheckOptions, GradCheckReport, Program};
pub use graph::{sigmoid, BatchStats, BnMode, Fault, Gradients, Graph, PoolMode, Var};
