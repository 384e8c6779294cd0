//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_gradcheck, GradCheckOptions, GradCheckReport};
pub use graph::{BinaryOp, Graph, Var, MASK_SENTINEL};
#[cfg(test)]
mod tests;
