//! Minimal dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Everything runs single-threaded, so results are bit-reproducible for a
//! fixed sequence of operations.

pub mod kernels;
mod scalar;
mod tensor;
mod var;

pub use kernels::ConvGeom;
pub use scalar::{gemm, Float};
pub use tensor::{broadcast_shape, Tensor};
pub use var::{Gradients, Tape, Var};
