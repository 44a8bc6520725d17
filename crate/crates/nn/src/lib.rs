//! Minimal differentiable tensor layer set: linear, 1-D convolution, group
//! normalization, multi-head self-attention and SiLU, with reverse-mode
//! gradients over a recorded graph and an Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for tight finite-difference checks.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use layers::{group_count, Conv1d, GroupNorm, Linear, SelfAttention};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
