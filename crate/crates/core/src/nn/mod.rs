//! Small CPU neural-network engine: tensors, 3D convolution kernels,
//! reverse-mode graph, layers, optimisers and a weights archive.

pub mod archive;
pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use conv::ConvSpec;
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
