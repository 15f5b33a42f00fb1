//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! The engine is deliberately small: every op the staged encoder, the
//! projection heads and the contrastive objectives need, and nothing else.
//! A [`Graph`] is built fresh for each forward pass; parameters enter it as
//! leaves and gradients are read back after [`Graph::backward`].
//!
//! The scalar type is `f32` by default. Building with the `f64` feature
//! switches [`Float`] to `f64`, which is used for tight gradient checks.

// Casts through `Float` are no-ops in one of the two precisions.
#![allow(clippy::unnecessary_cast)]

mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod serialize;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchMoments, Graph, RunningStats, Var, BN_EPS, BN_MOMENTUM, L2_EPS};
pub use tensor::Tensor;

/// Engine scalar.
#[cfg(not(feature = "f64"))]
pub type Float = f32;

/// Engine scalar.
#[cfg(feature = "f64")]
pub type Float = f64;
