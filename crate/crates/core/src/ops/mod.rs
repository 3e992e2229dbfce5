//! Differentiable tensor operations. Unary operations are methods on
//! [`Var`](crate::graph::Var); operations with several inputs are free
//! functions.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod sample;
mod shape;

pub use conv::{conv2d, conv_out_size};
pub use linalg::{linear, matmul};
pub use norm::{batch_norm, layer_norm, BatchStats};
pub use shape::concat;

pub(crate) use sample::axis_taps;

