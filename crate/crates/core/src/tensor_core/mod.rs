//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use tape::{BatchStats, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
