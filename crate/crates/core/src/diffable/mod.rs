//! A small reverse-mode differentiation engine over dense `f64` arrays,
//! with just the kernels the set encoder and its likelihood loss need.

mod array;
mod cases;
mod check;
mod graph;

pub use array::Array;
pub use cases::{kernel_cases, KernelCase};
pub use check::{finite_diff_check, finite_diff_check_with, CheckReport, Stencil};
pub use graph::{Axis, Gradients, Graph, Var, RMS_EPS};

#[cfg(test)]
mod tests;
