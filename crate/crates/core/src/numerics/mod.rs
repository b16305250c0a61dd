//! Minimal differentiable numerics: dense row-major tensors, the
//! elementwise/matrix kernels the encoder needs, a reverse-mode
//! gradient tape, and a central finite-difference checker.
//!
//! Training and inference run in 32-bit; gradient checks switch the
//! same code to 64-bit through the [`Real`] trait. Every kernel
//! rejects non-finite results instead of propagating them.

mod check;
mod func;
mod real;
mod tape;
mod tensor;

pub use check::grad_check;
pub use func::{
    add, attention, cross_entropy, entropy, gelu, layer_norm, log_softmax, matmul, mul, scale,
    softmax, sub, transpose,
};
pub use real::Real;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;

/// Default epsilon for layer normalization: guards zero-variance rows.
pub const LAYER_NORM_EPS: f64 = 1e-5;
