//! Hierarchical augmentation invariance for siamese self-supervised learning.
//!
//! Four nested augmentation pipelines `T₁ ⊂ … ⊂ T₄` are built by adding one
//! augmentation kind per stage. View pairs drawn from `Tᵢ` are encoded by
//! the first `i` backbone stages, mapped to a common shape by a stage
//! adapter, optionally concatenated with an embedding of the exact
//! augmentation parameters, projected, and scored by a contrastive loss.
//! The overall objective is the plain sum of the four stage losses.

// Casts through `Float` are no-ops in one of the two precisions.
#![allow(clippy::unnecessary_cast)]

pub mod augment;
pub mod error;
pub mod io;
pub mod model;
pub mod objectives;
pub mod probes;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
