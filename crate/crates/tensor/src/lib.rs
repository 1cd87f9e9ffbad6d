//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]; a forward pass records operations on a
//! [`Tape`] through [`Var`] handles, and [`Tape::backward`] returns the
//! gradient of every leaf that requires one. Layer kernels (convolution,
//! transposed convolution, batch normalization) are in [`ops`].

mod error;
pub mod gradcheck;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use scalar::{gemm, DType, MatRef, Scalar};
pub use tape::{Gradients, Parameter, Tape, Var};
pub use tensor::Tensor;
