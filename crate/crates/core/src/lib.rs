//! Principal manifold flows.
//!
//! Normalizing flows whose latent blocks ("contours") are trained to meet at
//! right angles, so that each block traces a principal manifold of the
//! learned density. The crate provides the differentiation engine, the layer
//! zoo, contour log-likelihoods and mutual-information diagnostics, the
//! training objectives with their single-probe estimators, synthetic data,
//! and a training loop with checkpoints.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which the tolerances in the
//! test suite assume.

pub mod contours;
pub mod data;
pub mod diff;
pub mod error;
pub mod flows;
pub mod io;
pub mod linalg;
pub mod objectives;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = diff::Graph<f64>;
pub type FlowStack = flows::FlowStack<f64>;
