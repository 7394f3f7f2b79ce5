//! Dense tensors, reverse-mode autodiff, layers and the Adam optimizer.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Conv2d, ConvTranspose2d, Linear, ParamId, ParamStore};
pub use tensor::Tensor;
