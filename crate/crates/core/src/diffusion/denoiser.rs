//! Small U-shaped noise-prediction network.
//!
//! The image is folded into `patch x patch` sub-pixel channels, processed at
//! three resolutions with residual blocks, and unfolded again. Two coordinate
//! channels join the input so that position-dependent conditions (the lesion
//! quadrant) can be placed. Cross-attention over the conditioning tokens runs
//! at every resolution, with self-attention at the coarsest; the
//! timestep enters every residual block through a sinusoidal encoding and a
//! small MLP, together with the mean of the conditioning tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{noise_from_output, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, Norm, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// What the network regresses. Velocity is `sqrt(ab) * eps - sqrt(1 - ab) * z0`;
/// either way [`Denoiser::predict_noise`] hands the sampler a noise estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Epsilon,
    #[default]
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Channel widths at full, half and quarter patch resolution.
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub attn_dim: usize,
    #[serde(default)]
    pub prediction: Prediction,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 2,
            widths: [32, 64, 96],
            time_dim: 64,
            embed_dim: 128,
            cond_dim: 64,
            attn_dim: 64,
            prediction: Prediction::default(),
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Shape of one image, `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }

    fn validate(&self) -> Result<()> {
        let grid = self.image_size / self.patch.max(1);
        if self.patch == 0 || self.image_size % self.patch != 0 || grid % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must split into patches of {} and a grid divisible by 4",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    time: Linear,
    norm2: Norm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, ch: usize, emb: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_std = 0.1 * (1.0 / (9 * ch) as f64).sqrt();
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), ch),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), emb, ch, true, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), ch),
            conv2: Conv2d::with_std(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, out_std, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let t = self.time.forward(g, p, emb);
        let h = g.add_batch_chan(h, t);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_dim: usize,
}

impl CrossAttention {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, ch: usize, cond: usize, attn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), ch),
            q: Linear::new(store, &format!("{name}.q"), ch, attn, false, rng),
            k: Linear::new(store, &format!("{name}.k"), cond, attn, false, rng),
            v: Linear::new(store, &format!("{name}.v"), cond, attn, false, rng),
            out: Linear::with_std(store, &format!("{name}.out"), attn, ch, true, 0.1 / (attn as f64).sqrt(), rng),
            attn_dim: attn,
        }
    }

    /// `x` is `[B, H, W, C]`, `cond` is `[B, L, D]`.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var, cond: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let flat = g.reshape(x, &[b, hw, c]);
        let h = self.norm.forward(g, p, flat);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, cond);
        let v = self.v.forward(g, p, cond);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, S::c(1.0 / (self.attn_dim as f64).sqrt()));
        let attn = g.softmax_last(scores);
        let o = g.bmm(attn, v, false);
        let o = self.out.forward(g, p, o);
        let y = g.add(flat, o);
        g.reshape(y, &s)
    }

    /// Attention of the feature map over itself; built with `cond == ch`.
    fn forward_self<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let flat = g.reshape(x, &[b, hw, c]);
        let h = self.norm.forward(g, p, flat);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, h);
        let v = self.v.forward(g, p, h);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, S::c(1.0 / (self.attn_dim as f64).sqrt()));
        let attn = g.softmax_last(scores);
        let o = g.bmm(attn, v, false);
        let o = self.out.forward(g, p, o);
        let y = g.add(flat, o);
        g.reshape(y, &s)
    }
}

/// `[B, H, W, 2]` grid of x and y coordinates in `[-1, 1]`.
fn coordinates<S: Scalar>(b: usize, h: usize, w: usize) -> Tensor<S> {
    let mut out = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b {
        for y in 0..h {
            for x in 0..w {
                out.push(S::c((2 * x + 1) as f64 / w as f64 - 1.0));
                out.push(S::c((2 * y + 1) as f64 / h as f64 - 1.0));
            }
        }
    }
    Tensor::new(&[b, h, w, 2], out)
}

#[derive(Debug, Clone)]
struct UNet {
    time1: Linear,
    time2: Linear,
    pooled: Linear,
    conv_in: Conv2d,
    res0: ResBlock,
    attn0: CrossAttention,
    down0: Conv2d,
    res1: ResBlock,
    attn1: CrossAttention,
    down1: Conv2d,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid_self: CrossAttention,
    mid2: ResBlock,
    merge1: Conv2d,
    up_res1: ResBlock,
    up_attn1: CrossAttention,
    merge0: Conv2d,
    up_res0: ResBlock,
    up_attn0: CrossAttention,
    norm_out: Norm,
    conv_out: Conv2d,
}

impl UNet {
    fn build<S: Scalar>(cfg: &DenoiserConfig, store: &mut ParamStore<S>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let r = &mut rng;
        let [c0, c1, c2] = cfg.widths;
        let e = cfg.embed_dim;
        let pc = cfg.patch * cfg.patch * cfg.channels;
        let (d, a) = (cfg.cond_dim, cfg.attn_dim);
        Self {
            time1: Linear::new(store, "time.l1", cfg.time_dim, e, true, r),
            time2: Linear::new(store, "time.l2", e, e, true, r),
            pooled: Linear::new(store, "time.pooled", d, e, false, r),
            conv_in: Conv2d::new(store, "conv_in", pc + 2, c0, 3, 1, 1, r),
            res0: ResBlock::new(store, "down.res0", c0, e, r),
            attn0: CrossAttention::new(store, "down.attn0", c0, d, a, r),
            down0: Conv2d::new(store, "down.conv0", c0, c1, 3, 2, 1, r),
            res1: ResBlock::new(store, "down.res1", c1, e, r),
            attn1: CrossAttention::new(store, "down.attn1", c1, d, a, r),
            down1: Conv2d::new(store, "down.conv1", c1, c2, 3, 2, 1, r),
            mid1: ResBlock::new(store, "mid.res1", c2, e, r),
            mid_attn: CrossAttention::new(store, "mid.attn", c2, d, a, r),
            mid_self: CrossAttention::new(store, "mid.self", c2, c2, a, r),
            mid2: ResBlock::new(store, "mid.res2", c2, e, r),
            merge1: Conv2d::new(store, "up.merge1", c2 + c1, c1, 1, 1, 0, r),
            up_res1: ResBlock::new(store, "up.res1", c1, e, r),
            up_attn1: CrossAttention::new(store, "up.attn1", c1, d, a, r),
            merge0: Conv2d::new(store, "up.merge0", c1 + c0, c0, 1, 1, 0, r),
            up_res0: ResBlock::new(store, "up.res0", c0, e, r),
            up_attn0: CrossAttention::new(store, "up.attn0", c0, d, a, r),
            norm_out: Norm::new(store, "out.norm", c0),
            conv_out: Conv2d::with_std(store, "out.conv", c0, pc, 3, 1, 1, 0.1 / (9.0 * c0 as f64).sqrt(), r),
        }
    }
}

/// Sinusoidal encoding of integer timesteps, `[B, dim]`.
pub fn timestep_encoding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(S::c((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(S::c((t as f64 * freq).cos()));
        }
        for _ in 2 * half..dim {
            out.push(S::zero());
        }
    }
    Tensor::new(&[ts.len(), dim], out)
}

/// Trained (or freshly initialized) noise predictor: configuration plus
/// parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<S: Scalar> {
    config: DenoiserConfig,
    net: UNet,
    params: ParamStore<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = UNet::build(&config, &mut params);
        Ok(Self { config, net, params })
    }

    /// Rebuild from a config and a previously serialized store.
    pub fn from_parts(config: DenoiserConfig, stored: ParamStore<S>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != stored.len()
            || fresh.params.ids().any(|id| {
                fresh.params.name(id) != stored.name(id) || fresh.params.get(id).shape() != stored.get(id).shape()
            })
        {
            return Err(Error::Format("stored parameters do not match the denoiser layout".into()));
        }
        Ok(Self { config: fresh.config, net: fresh.net, params: stored })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Predict noise for `z_t` (`[B, H, W, C]`) at timesteps `ts` under
    /// conditioning tokens `cond` (`[B, L, D]`).
    pub fn forward(&self, g: &mut Graph<S>, z_t: Var, ts: &[usize], cond: Var) -> Var {
        let p = &self.params;
        let n = &self.net;
        let b = g.shape(z_t)[0];
        assert_eq!(ts.len(), b, "one timestep per batch item");
        assert_eq!(g.shape(cond)[0], b, "one condition per batch item");

        let temb = g.constant(timestep_encoding(ts, self.config.time_dim));
        let emb = n.time1.forward(g, p, temb);
        // mean of the conditioning tokens joins the timestep embedding
        let l = g.shape(cond)[1];
        let avg = g.constant(Tensor::full(&[b, 1, l], S::c(1.0 / l as f64)));
        let pooled = g.bmm(avg, cond, false);
        let pooled = g.reshape(pooled, &[b, self.config.cond_dim]);
        let pooled = n.pooled.forward(g, p, pooled);
        let emb = g.add(emb, pooled);
        let emb = g.silu(emb);
        let emb = n.time2.forward(g, p, emb);
        let emb = g.silu(emb);

        let x = g.space_to_depth(z_t, self.config.patch);
        let xs = g.shape(x).to_vec();
        let coords = g.constant(coordinates(b, xs[1], xs[2]));
        let x = g.concat_last(x, coords);
        let h0 = n.conv_in.forward(g, p, x);
        let h0 = n.res0.forward(g, p, h0, emb);
        let h0 = n.attn0.forward(g, p, h0, cond);
        let h1 = n.down0.forward(g, p, h0);
        let h1 = n.res1.forward(g, p, h1, emb);
        let h1 = n.attn1.forward(g, p, h1, cond);
        let m = n.down1.forward(g, p, h1);
        let m = n.mid1.forward(g, p, m, emb);
        let m = n.mid_attn.forward(g, p, m, cond);
        let m = n.mid_self.forward_self(g, p, m);
        let m = n.mid2.forward(g, p, m, emb);

        let u1 = g.upsample2x(m);
        let u1 = g.concat_last(u1, h1);
        let u1 = n.merge1.forward(g, p, u1);
        let u1 = n.up_res1.forward(g, p, u1, emb);
        let u1 = n.up_attn1.forward(g, p, u1, cond);
        let u0 = g.upsample2x(u1);
        let u0 = g.concat_last(u0, h0);
        let u0 = n.merge0.forward(g, p, u0);
        let u0 = n.up_res0.forward(g, p, u0, emb);
        let u0 = n.up_attn0.forward(g, p, u0, cond);
        let out = n.norm_out.forward(g, p, u0);
        let out = g.silu(out);
        let out = n.conv_out.forward(g, p, out);
        g.depth_to_space(out, self.config.patch)
    }

    /// Gradient-free raw network output (noise or velocity, per config).
    pub fn predict(&self, z_t: &Tensor<S>, ts: &[usize], cond: &Tensor<S>) -> Tensor<S> {
        let mut g = Graph::inference();
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, z, ts, c);
        g.value(out).clone()
    }

    /// Gradient-free noise estimate for `z_t`.
    pub fn predict_noise(&self, z_t: &Tensor<S>, ts: &[usize], cond: &Tensor<S>, sched: &NoiseSchedule<S>) -> Tensor<S> {
        let out = self.predict(z_t, ts, cond);
        let abs: Vec<S> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
        noise_from_output(self.config.prediction, &out, z_t, &abs)
    }
}
