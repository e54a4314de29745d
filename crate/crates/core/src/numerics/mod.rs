//! Dense tensors, a recording graph with reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ProbeMode};
pub use graph::{Gradients, Graph, Op, Var};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Tensor};
