//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState, Parameter};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Backward, Graph, Var};
pub(crate) use ops::bias_grad;
pub use ops::{conv2d, conv2d_backward, l1_loss, max_pool2, relu, ConvParams};
pub use tensor::Tensor;
