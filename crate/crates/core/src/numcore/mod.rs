//! Dense tensors, a reverse-mode tape, and Adam.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, MASK_FILL};
pub use scalar::Scalar;
pub use tensor::Tensor;
