//! Minimal CPU autodiff engine backing the detection and restoration networks.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Mode, NormUpdate, Var};
pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, Init};
pub use optim::{apply_norm_updates, Sgd, StatsPolicy};
pub use params::{BufferId, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
