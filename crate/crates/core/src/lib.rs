//! Bitemporal change detection with cross-stage aggregation, multi-scale
//! fusion and efficient self-attention, on a small reverse-mode autograd.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pick the usual instantiations.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod csa;
pub mod data;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod inspect;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use metrics::{compute_metrics, ConfusionCounts, Metrics};
pub use model::{Ablation, ModelConfig, RctNet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type RctNet32 = RctNet<f32>;
pub type RctNet64 = RctNet<f64>;
