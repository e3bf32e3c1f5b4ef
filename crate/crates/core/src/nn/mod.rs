//! Minimal tensor and reverse-mode autodiff engine.

#[cfg(test)]
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvGeom, Graph, Var};
pub use layers::{Conv2d, Linear, Norm};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
