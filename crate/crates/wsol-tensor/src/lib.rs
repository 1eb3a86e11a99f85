//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The operator set is deliberately small: elementwise arithmetic with
//! per-channel broadcasting, 2-D convolution, global average pooling,
//! bilinear/nearest upsampling, channel concatenation, matmul for linear
//! heads, and two fused losses (softmax cross-entropy, masked binary
//! cross-entropy). Everything is recorded on a [`Tape`] and differentiated
//! by a single reverse sweep.
//!
//! Tensors are generic over the element type: `f32` for training speed,
//! `f64` when gradients are checked against finite differences.

pub mod error;
pub mod gradcheck;
pub mod ndfile;
mod ops;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Tape, Var};
pub use tensor::{bilinear_resize_2d, Element, Tensor};
