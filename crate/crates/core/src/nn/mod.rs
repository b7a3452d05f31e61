//! Minimal neural-network core: dense tensors, a tape-based reverse-mode
//! autodiff graph, the layer zoo the counting model needs, and AdamW.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tensor;

pub use graph::{Grads, Graph, NodeId, Pad};
pub use layers::{Conv2d, DepthwiseConv2d, LayerNorm, Linear};
pub use optim::AdamW;
pub use store::{ParamId, ParamStore};
pub use tensor::{sc, Scalar, Tensor};
