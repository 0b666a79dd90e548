//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Forward ops are executed eagerly and appended to a [`Tape`]; a single
//! reverse sweep from a scalar loss produces [`Gradients`] for every leaf
//! that asked for them.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{central_differences, finite_diff_check, max_relative_error};
pub use tape::{Gradients, Reduction, Tape, Var, SELU_ALPHA, SELU_LAMBDA};
