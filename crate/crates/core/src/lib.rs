//! Transformation-invariant contrastive representation learning.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod spirograph;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::{Dual, Real, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
