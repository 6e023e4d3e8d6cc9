pub mod audit;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
