//! A small autodiff engine for dense f32 tensors.
//!
//! Provides [`Tensor`] (plain data plus deterministic single-threaded
//! kernels), [`Var`] (a graph node supporting reverse-mode differentiation,
//! including gradients of gradients), Glorot initialization, and Adam.

pub mod adam;
pub mod init;
pub mod tensor;
pub mod var;

pub use adam::{Adam, AdamSlot};
pub use tensor::Tensor;
pub use var::{concat, grad, Var};
