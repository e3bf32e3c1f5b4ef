//! Conditional denoising diffusion: schedule, noise predictor, training and
//! sampling.

mod denoiser;
mod sample;
mod schedule;

pub use denoiser::{timestep_encoding, Denoiser, DenoiserConfig, Prediction};
pub use sample::{sample, sample_batch, Codec, IdentityCodec, SamplerConfig};
pub(crate) use sample::gaussian;
pub use schedule::*;
