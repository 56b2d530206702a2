//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{check_gradients, relative_error, GradCheckReport, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use params::{AdamConfig, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_tensor;
pub(crate) use tensor::conv2d_raw;

/// Softmax of a plain tensor over all of its entries.
pub fn softmax(t: &Tensor) -> Tensor {
    softmax_tensor(t)
}
