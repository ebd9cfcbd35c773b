//! Dense tensors, numeric kernels and a recorded graph with reverse-mode
//! differentiation.

mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod macs;
mod tensor;

pub use float::{DType, Float};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::AttnDims;
pub use tensor::Tensor;
