//! Dense tensors and the reverse-mode autodiff graph every model formula is built on.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod tensor;

pub use gradcheck::check_gradient;
pub use graph::{rope_tables, softmax_masked_row, AttentionView, Gradients, Graph, Var, NORM_EPS, RMS_EPS};
pub use tensor::Tensor;

