pub mod align;
pub mod attributes;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grammar;
pub mod nn;
pub mod oneshot;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used for training and generation.
pub type Tensor32 = nn::Tensor<f32>;
pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type TextEncoder32 = align::TextEncoder<f32>;
pub type AttributeBranches32 = align::AttributeBranches<f32>;
pub type PrototypeEmbedding32 = oneshot::PrototypeEmbedding<f32>;
pub type Models32 = experiment::Models<f32>;

/// Double-precision instantiations, mainly for gradient checks.
pub type Tensor64 = nn::Tensor<f64>;
pub type Denoiser64 = diffusion::Denoiser<f64>;
pub type TextEncoder64 = align::TextEncoder<f64>;
pub type AttributeBranches64 = align::AttributeBranches<f64>;
pub type PrototypeEmbedding64 = oneshot::PrototypeEmbedding<f64>;
pub type Models64 = experiment::Models<f64>;
