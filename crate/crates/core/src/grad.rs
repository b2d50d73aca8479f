//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! [`tensor`] holds the value type and its on-disk format, [`graph`] the
//! tape of operations and the backward pass, [`check`] the finite-difference
//! oracle used to validate analytic gradients.

pub mod check;
pub mod graph;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_check_sampled};
pub use graph::{BnMode, BnRunning, Graph, Padding, Var};
pub use tensor::Tensor;
