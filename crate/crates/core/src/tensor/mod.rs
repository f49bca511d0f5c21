//! Dense tensors and the reverse-mode tape.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;

pub use array::Tensor;
pub use gradcheck::{finite_diff_check, GradCheckReport, Probe};
pub use graph::{conv_output_shape, logsumexp, BackwardRule, Gradients, Graph, Primitive, Var};
