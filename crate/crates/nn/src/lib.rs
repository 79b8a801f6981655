//! A small CPU tensor library with reverse-mode automatic differentiation,
//! sized for desk-scale convolutional detectors and rankers.
//!
//! Everything runs single-threaded in a fixed operation order, so a forward
//! or backward pass is bitwise reproducible for identical inputs.

mod archive;
mod error;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use archive::Archive;
pub use error::NnError;
pub use graph::{sigmoid, Gradients, Graph, Group, Var};
pub use layers::{Conv2d, Linear};
pub use optim::{Sgd, SgdConfig};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
