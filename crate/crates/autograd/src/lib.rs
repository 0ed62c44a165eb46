//! Reverse-mode automatic differentiation over small NCHW tensors.
//!
//! Operations are recorded on a [`Tape`] through [`Var`] handles. Backward
//! rules are themselves expressed with recorded ops, which is what makes
//! gradient penalties (a gradient inside the loss) trainable.

pub mod check;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{Tape, Var};
pub use kernels::{Mat, ResamplePlan, SpatialPlan};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
