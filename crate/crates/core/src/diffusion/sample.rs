//! DDIM sampling along a strided timestep ladder.

use rand_distr::{Distribution, StandardNormal};

use super::denoiser::Denoiser;
use super::schedule::{ddim_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::scalar::Scalar;

/// Map between images and the space the denoiser works in.
pub trait Codec<S: Scalar> {
    fn encode(&self, image: &Tensor<S>) -> Tensor<S>;
    fn decode(&self, latent: &Tensor<S>) -> Tensor<S>;
}

/// Pixel space. Decoding clips to the image range `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl<S: Scalar> Codec<S> for IdentityCodec {
    fn encode(&self, image: &Tensor<S>) -> Tensor<S> {
        image.clone()
    }

    fn decode(&self, latent: &Tensor<S>) -> Tensor<S> {
        latent.map(|v| v.max(-S::one()).min(S::one()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma: f64,
    /// Clip the predicted clean image to `[-1, 1]` before each update.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, sigma: 0.0, clip_denoised: true }
    }
}

pub(crate) fn gaussian<S: Scalar>(shape: &[usize], r: &mut impl rand::Rng) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::c(StandardNormal.sample(r))).collect())
}

/// Noise estimate consistent with the clipped clean-image prediction.
fn clipped_eps<S: Scalar>(z: &Tensor<S>, eps: &Tensor<S>, ab: S) -> Tensor<S> {
    let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
    z.zip_map(eps, |zt, e| {
        let z0 = ((zt - b * e) / a).max(-S::one()).min(S::one());
        (zt - a * z0) / b
    })
}

/// Generate one image per condition. `conds` is `[B, L, D]`; image `i` uses
/// only streams derived from `seeds[i]`, so batching does not change which
/// random numbers an image sees.
pub fn sample_batch<S: Scalar>(
    den: &Denoiser<S>,
    conds: &Tensor<S>,
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Tensor<S>> {
    let b = seeds.len();
    if conds.shape().len() != 3 || conds.shape()[0] != b {
        return Err(Error::Shape(format!("conditions {:?} for {b} seeds", conds.shape())));
    }
    if cfg.steps > sched.steps() {
        return Err(Error::InvalidArgument(format!("{} sampler steps exceed schedule length {}", cfg.steps, sched.steps())));
    }
    let img = den.config().image_shape();
    let mut shape = vec![b];
    shape.extend_from_slice(&img);
    let per = img.iter().product::<usize>();
    let mut z_data = Vec::with_capacity(b * per);
    for &s in seeds {
        z_data.extend(gaussian::<S>(&img, &mut rng::stream(s, "sample/init", 0)).into_data());
    }
    let mut z = Tensor::new(&shape, z_data);
    let ladder = sched.ladder(cfg.steps)?;
    let sigma = S::c(cfg.sigma);
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = ladder.get(i + 1).copied();
        let mut eps = den.predict_noise(&z, &vec![t; b], conds, sched);
        if cfg.clip_denoised {
            eps = clipped_eps(&z, &eps, sched.alpha_bar(t));
        }
        let noise = (cfg.sigma > 0.0).then(|| {
            let mut d = Vec::with_capacity(b * per);
            for &s in seeds {
                d.extend(gaussian::<S>(&img, &mut rng::stream(s, "sample/noise", i as u64)).into_data());
            }
            Tensor::new(&shape, d)
        });
        z = ddim_step(&z, &eps, t, t_prev, sigma, noise.as_ref(), sched)?;
    }
    Ok(IdentityCodec.decode(&z))
}

/// Generate one image from a `[L, D]` condition.
pub fn sample<S: Scalar>(
    den: &Denoiser<S>,
    cond: &Tensor<S>,
    sched: &NoiseSchedule<S>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<S>> {
    let mut s = vec![1];
    s.extend_from_slice(cond.shape());
    let out = sample_batch(den, &cond.clone().reshape(&s), sched, cfg, &[seed])?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(&shape))
}
