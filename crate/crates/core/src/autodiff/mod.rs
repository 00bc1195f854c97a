//! Dense `f64` tensors with a define-by-run reverse-mode tape.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{concat, Gradients, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};

#[cfg(test)]
mod tests;
