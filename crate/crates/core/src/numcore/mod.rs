//! Dense tensors, tape-based reverse-mode differentiation, and a
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, DEFAULT_EPS};
pub use graph::{gradient, Gradients, Graph, Var};
pub use rng::{mix_seed, Rng};
pub use tensor::Tensor;
