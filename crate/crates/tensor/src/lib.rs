//! Dense tensors with a reverse-mode gradient tape.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] and differentiated with [`Tape::backward`]. The engine is generic
//! over `f32` and `f64` through [`Real`].

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use real::Real;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
