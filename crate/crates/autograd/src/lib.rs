//! A compact reverse-mode automatic differentiation engine in double
//! precision, sized for desk-scale vision models. Feature maps are handled
//! one sample at a time in `C×H×W` layout; token sequences are `N×C`.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
