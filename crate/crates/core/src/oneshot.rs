//! One-shot personalization: prototype inversion against a frozen
//! denoiser, the tailored embedding rebuilt from decoded attributes, their
//! attention fusion and ablation-aware synthesis.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AttributeBranches, NearestDecoder, TextEncoder};
use crate::attributes::{AttributeKind, AttributeSet};
use crate::diffusion::{add_noise_at, gaussian, prediction_target, sample_batch, Denoiser, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grammar::format_report;
use crate::nn::{Adam, Graph, Tensor};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub tokens: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { tokens: 4, steps: 400, batch: 16, lr: 1e-2, seed: 0 }
    }
}

/// Learned prototype tokens `[P, D]` for one rare class.
#[derive(Clone, Debug)]
pub struct PrototypeEmbedding<S: Scalar> {
    pub class_name: String,
    pub tokens: Tensor<S>,
    pub losses: Vec<f64>,
    pub optimizer: Adam<S>,
}

/// Initial prototype: the class name repeated `P` times, text-encoded.
pub fn init_prototype<S: Scalar>(text: &TextEncoder<S>, class_name: &str, p: usize) -> Result<Tensor<S>> {
    if p == 0 {
        return Err(Error::InvalidArgument("prototype needs at least one token".into()));
    }
    let words = vec![class_name; p].join(" ");
    text.encode(&words)
}

/// Reconstruction loss graph of a `[P, D]` prototype leaf on one batch of
/// noised copies of the exemplar. Returns `(loss, leaf)`.
fn recon_graph<S: Scalar>(
    g: &mut Graph<S>,
    den: &Denoiser<S>,
    sched: &NoiseSchedule<S>,
    image: &Tensor<S>,
    tokens: &Tensor<S>,
    batch: usize,
    seed: u64,
    step: usize,
) -> Result<(crate::nn::Var, crate::nn::Var)> {
    let mut r = rng::stream(seed, "prototype/batch", step as u64);
    let ts: Vec<usize> = (0..batch).map(|_| r.random_range(0..sched.steps())).collect();
    let x0 = Tensor::stack(&vec![image.clone(); batch]);
    let eps: Tensor<S> = gaussian(x0.shape(), &mut r);
    let per = image.len();
    let mut zt = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        let e = Tensor::new(&[per], eps.data()[b * per..(b + 1) * per].to_vec());
        zt.extend(add_noise_at(&image.clone().reshape(&[per]), &e, sched.alpha_bar(t))?.into_data());
    }
    let p = g.leaf(tokens.clone());
    let cond = g.broadcast_batch(p, batch);
    let zt = g.constant(Tensor::new(x0.shape(), zt));
    let abs: Vec<S> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
    let target = g.constant(prediction_target(den.config().prediction, &x0, &eps, &abs));
    let pred = den.forward(g, zt, &ts, cond);
    Ok((g.mse(pred, target), p))
}

/// Optimize only the prototype tokens to reconstruct the exemplar under the
/// frozen denoiser. The denoiser store must be frozen.
pub fn optimize_prototype<S: Scalar>(
    image: &Tensor<S>,
    class_name: &str,
    den: &Denoiser<S>,
    text: &TextEncoder<S>,
    sched: &NoiseSchedule<S>,
    cfg: &PrototypeConfig,
) -> Result<PrototypeEmbedding<S>> {
    if !den.params().is_frozen() {
        return Err(Error::NotFrozen);
    }
    if image.shape() != den.config().image_shape() {
        return Err(Error::Shape(format!("exemplar {:?} vs denoiser {:?}", image.shape(), den.config().image_shape())));
    }
    let mut tokens = init_prototype(text, class_name, cfg.tokens)?;
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let (loss, p) = recon_graph(&mut g, den, sched, image, &tokens, cfg.batch, cfg.seed, step)?;
        let l = g.value(loss).data()[0].f64();
        if !l.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(l);
        g.backward(loss);
        let grad = g.grad(p).cloned();
        opt.step_slices(&mut [tokens.data_mut()], &[grad]);
    }
    Ok(PrototypeEmbedding { class_name: class_name.to_string(), tokens, losses, optimizer: opt })
}

/// Value and gradient of the reconstruction loss at fixed tokens, for
/// finite-difference checks.
#[doc(hidden)]
pub fn recon_loss_and_grad<S: Scalar>(
    image: &Tensor<S>,
    tokens: &Tensor<S>,
    den: &Denoiser<S>,
    sched: &NoiseSchedule<S>,
    batch: usize,
    seed: u64,
) -> Result<(f64, Tensor<S>)> {
    let mut g = Graph::new();
    let (loss, p) = recon_graph(&mut g, den, sched, image, tokens, batch, seed, 0)?;
    let l = g.value(loss).data()[0].f64();
    g.backward(loss);
    Ok((l, g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(tokens.shape()))))
}

/// Encoded template sentence of decoded (or overridden) attributes.
#[derive(Clone, Debug)]
pub struct TailoredEmbedding<S: Scalar> {
    pub tokens: Tensor<S>,
    pub decoded_attributes: AttributeSet,
}

impl<S: Scalar> TailoredEmbedding<S> {
    pub fn from_attributes(text: &TextEncoder<S>, attrs: AttributeSet) -> Result<Self> {
        Ok(Self { tokens: text.encode(&format_report(&attrs))?, decoded_attributes: attrs })
    }

    /// Replace one slot and re-encode.
    pub fn with_attribute(&self, text: &TextEncoder<S>, kind: AttributeKind, value: usize) -> Result<Self> {
        Self::from_attributes(text, self.decoded_attributes.with(kind, value))
    }
}

/// Decode the exemplar's visual attributes to vocabulary tokens and encode
/// the resulting report.
pub fn build_tailored<S: Scalar>(
    image: &Tensor<S>,
    branches: &AttributeBranches<S>,
    text: &TextEncoder<S>,
) -> Result<TailoredEmbedding<S>> {
    let mut s = vec![1];
    s.extend_from_slice(image.shape());
    let decoded = NearestDecoder::new(text).decode_images(branches, &image.clone().reshape(&s))?[0];
    TailoredEmbedding::from_attributes(text, decoded)
}

/// Which slots get resampled and which tokens are off-limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryPolicy {
    pub vary: Vec<AttributeKind>,
    #[serde(default)]
    pub exclude: Vec<(AttributeKind, String)>,
    pub seed: u64,
}

impl Default for VaryPolicy {
    fn default() -> Self {
        Self { vary: vec![AttributeKind::Color, AttributeKind::Location], exclude: Vec::new(), seed: 0 }
    }
}

/// Draw `draw` of the policy: each varied slot is resampled uniformly from
/// its vocabulary minus exclusions; other slots are kept.
pub fn vary_attributes<S: Scalar>(
    te: &TailoredEmbedding<S>,
    text: &TextEncoder<S>,
    policy: &VaryPolicy,
    draw: u64,
) -> Result<TailoredEmbedding<S>> {
    if policy.vary.is_empty() {
        return Ok(te.clone());
    }
    let mut r = rng::stream(policy.seed, "vary", draw);
    let mut attrs = te.decoded_attributes;
    for &kind in &policy.vary {
        let choices: Vec<usize> = (0..kind.tokens().len())
            .filter(|&i| !policy.exclude.iter().any(|(k, t)| *k == kind && t == kind.tokens()[i]))
            .collect();
        let &pick = choices
            .choose(&mut r)
            .ok_or_else(|| Error::InvalidArgument(format!("every {kind} token is excluded")))?;
        attrs = attrs.with(kind, pick);
    }
    TailoredEmbedding::from_attributes(text, attrs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Average,
    Concat,
}

#[derive(Clone, Debug)]
pub struct FusedEmbedding<S: Scalar> {
    pub tokens: Tensor<S>,
    pub mode: FusionMode,
    /// `[R, P]`, each row a softmax over prototype tokens.
    pub attention: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Attention fusion of prototype tokens `p` (`[P, D]`) and tailored tokens
/// `r` (`[R, D]`).
///
/// `A[i][j] = softmax_j(cos(r_i, p_j) / temperature)`. Average mode keeps
/// one token per prototype slot, `e_j = (p_j + sum_i A_ij r_i / sum_i A_ij) / 2`.
/// Concat mode appends the tailored tokens after mixing each with its
/// attention readout over `p`, `r'_i = (r_i + sum_j A_ij p_j) / 2`.
pub fn fuse<S: Scalar>(p: &Tensor<S>, r: &Tensor<S>, mode: FusionMode, temperature: f64) -> Result<FusedEmbedding<S>> {
    if p.shape().len() != 2 || r.shape().len() != 2 || p.shape()[1] != r.shape()[1] {
        return Err(Error::Shape(format!("fusion inputs {:?} and {:?}", p.shape(), r.shape())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("fusion temperature must be positive".into()));
    }
    let (np, nr, d) = (p.shape()[0], r.shape()[0], p.shape()[1]);
    let pv: Vec<Vec<f64>> = (0..np).map(|j| p.row(j).iter().map(|v| v.f64()).collect()).collect();
    let rv: Vec<Vec<f64>> = (0..nr).map(|i| r.row(i).iter().map(|v| v.f64()).collect()).collect();
    let attention: Vec<Vec<f64>> = rv
        .iter()
        .map(|ri| {
            let s: Vec<f64> = pv.iter().map(|pj| cosine(ri, pj) / temperature).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let out: Vec<f64> = match mode {
        FusionMode::Average => {
            let mut out = Vec::with_capacity(np * d);
            for j in 0..np {
                let w: f64 = (0..nr).map(|i| attention[i][j]).sum();
                for c in 0..d {
                    let agg: f64 = (0..nr).map(|i| attention[i][j] * rv[i][c]).sum::<f64>() / w;
                    out.push(0.5 * (pv[j][c] + agg));
                }
            }
            out
        }
        FusionMode::Concat => {
            let mut out: Vec<f64> = pv.iter().flatten().copied().collect();
            for i in 0..nr {
                for c in 0..d {
                    let read: f64 = (0..np).map(|j| attention[i][j] * pv[j][c]).sum();
                    out.push(0.5 * (rv[i][c] + read));
                }
            }
            out
        }
    };
    let rows = out.len() / d;
    Ok(FusedEmbedding { tokens: Tensor::from_f64(&[rows, d], &out), mode, attention })
}

/// Component switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub pse: bool,
    pub tle: bool,
    pub fm: bool,
}

impl Ablation {
    pub const PSE_ONLY: Ablation = Ablation { pse: true, tle: false, fm: false };
    pub const TLE_ONLY: Ablation = Ablation { pse: false, tle: true, fm: false };
    pub const PSE_TLE: Ablation = Ablation { pse: true, tle: true, fm: false };
    pub const FULL: Ablation = Ablation { pse: true, tle: true, fm: true };

    pub fn validate(&self) -> Result<()> {
        if !self.pse && !self.tle {
            return Err(Error::InvalidArgument("ablation must enable PSE or TLE".into()));
        }
        if self.fm && !(self.pse && self.tle) {
            return Err(Error::InvalidArgument("fusion requires both PSE and TLE".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match (self.pse, self.tle, self.fm) {
            (true, false, false) => "pse_only",
            (false, true, false) => "tle_only",
            (true, true, false) => "pse_tle",
            (true, true, true) => "full",
            _ => "invalid",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pse_only" | "pse" => Ok(Self::PSE_ONLY),
            "tle_only" | "tle" => Ok(Self::TLE_ONLY),
            "pse_tle" | "concat" => Ok(Self::PSE_TLE),
            "full" => Ok(Self::FULL),
            other => Err(Error::InvalidArgument(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n: usize,
    pub seed: u64,
    pub sampler_steps: usize,
    pub sigma: f64,
    pub fusion: FusionMode,
    pub temperature: f64,
    pub vary: VaryPolicy,
    /// Draw a fresh attribute variation for every image; otherwise one
    /// draw serves the whole set.
    pub resample_per_image: bool,
    pub batch: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n: 64,
            seed: 0,
            sampler_steps: 50,
            sigma: 0.0,
            fusion: FusionMode::Average,
            temperature: 1.0,
            vary: VaryPolicy::default(),
            resample_per_image: true,
            batch: 32,
        }
    }
}

/// One generated image and what conditioned it.
#[derive(Clone, Debug)]
pub struct SynthSample<S: Scalar> {
    pub image: Tensor<S>,
    pub seed: u64,
    pub attributes: Option<AttributeSet>,
    pub condition_hash: String,
}

/// Conditioning sequence for one sample.
pub fn condition<S: Scalar>(
    p: &Tensor<S>,
    r: Option<&TailoredEmbedding<S>>,
    ablation: Ablation,
    cfg: &SynthesisConfig,
) -> Result<Tensor<S>> {
    ablation.validate()?;
    let need_r = || r.ok_or_else(|| Error::InvalidArgument("ablation needs a tailored embedding".into()));
    Ok(match (ablation.pse, ablation.tle, ablation.fm) {
        (true, false, _) => p.clone(),
        (false, true, _) => need_r()?.tokens.clone(),
        (true, true, false) => {
            let r = &need_r()?.tokens;
            let mut d = p.data().to_vec();
            d.extend_from_slice(r.data());
            Tensor::new(&[p.shape()[0] + r.shape()[0], p.shape()[1]], d)
        }
        (true, true, true) => fuse(p, &need_r()?.tokens, cfg.fusion, cfg.temperature)?.tokens,
        _ => unreachable!("validated"),
    })
}

fn tensor_hash<S: Scalar>(t: &Tensor<S>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in t.data() {
        let mut b = Vec::with_capacity(S::BYTES);
        v.write_le(&mut b);
        h.update(&b);
    }
    hex::encode(&h.finalize()[..8])
}

/// Generate `cfg.n` images of a rare class under an ablation setting. The
/// models are only read.
pub fn synthesize_rare<S: Scalar>(
    p: &PrototypeEmbedding<S>,
    r: Option<&TailoredEmbedding<S>>,
    ablation: Ablation,
    den: &Denoiser<S>,
    text: &TextEncoder<S>,
    sched: &NoiseSchedule<S>,
    cfg: &SynthesisConfig,
) -> Result<Vec<SynthSample<S>>> {
    ablation.validate()?;
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("synthesis batch must be positive".into()));
    }
    let fixed = match (ablation.tle, r) {
        (true, Some(r)) if !cfg.resample_per_image => Some(vary_attributes(r, text, &cfg.vary, 0)?),
        _ => None,
    };
    let mut plan = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let te = match (ablation.tle, r) {
            (true, Some(r)) => Some(match &fixed {
                Some(f) => f.clone(),
                None => vary_attributes(r, text, &cfg.vary, i as u64)?,
            }),
            _ => None,
        };
        let c = condition(&p.tokens, te.as_ref(), ablation, cfg)?;
        plan.push((rng::derive_seed(cfg.seed, "synth", i as u64), te.map(|t| t.decoded_attributes), c));
    }
    let sampler = SamplerConfig { steps: cfg.sampler_steps, sigma: cfg.sigma, ..Default::default() };
    let mut out = Vec::with_capacity(cfg.n);
    for chunk in plan.chunks(cfg.batch) {
        let conds = Tensor::stack(&chunk.iter().map(|c| c.2.clone()).collect::<Vec<_>>());
        let seeds: Vec<u64> = chunk.iter().map(|c| c.0).collect();
        let imgs = sample_batch(den, &conds, sched, &sampler, &seeds)?;
        for (k, (seed, attrs, cond)) in chunk.iter().enumerate() {
            out.push(SynthSample { image: imgs.item(k), seed: *seed, attributes: *attrs, condition_hash: tensor_hash(cond) });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identical_token_is_a_fixed_point() {
        let p = Tensor::<f64>::from_f64(&[1, 3], &[0.2, -0.5, 1.0]);
        let f = fuse(&p, &p, FusionMode::Average, 1.0).unwrap();
        assert_eq!(f.attention, vec![vec![1.0]]);
        for (a, b) in f.tokens.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        // p = e1, e2 ; r = e1, (1,1)
        let p = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let r = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        let f = fuse(&p, &r, FusionMode::Average, 1.0).unwrap();
        // row 0: cos = (1, 0); row 1: cos = (1/sqrt2, 1/sqrt2)
        let a0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((f.attention[0][0] - a0).abs() < 1e-12);
        assert!((f.attention[1][0] - 0.5).abs() < 1e-12);
        // column 0: weights a0, 0.5 on r0=(1,0), r1=(1,1)
        let w0 = a0 + 0.5;
        let agg0 = [(a0 + 0.5) / w0, 0.5 / w0];
        let e0 = [0.5 * (1.0 + agg0[0]), 0.5 * agg0[1]];
        let w1 = (1.0 - a0) + 0.5;
        let agg1 = [((1.0 - a0) + 0.5) / w1, 0.5 / w1];
        let e1 = [0.5 * agg1[0], 0.5 * (1.0 + agg1[1])];
        let want = [e0[0], e0[1], e1[0], e1[1]];
        for (a, b) in f.tokens.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rows_sum_to_one_and_concat_length() {
        let p = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 1.0]);
        let r = Tensor::<f64>::from_f64(&[2, 2], &[0.3, 0.1, -2.0, 1.0]);
        let f = fuse(&p, &r, FusionMode::Concat, 0.5).unwrap();
        assert_eq!(f.tokens.shape(), &[5, 2]);
        for row in &f.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = fuse(&p, &r, FusionMode::Average, 0.5).unwrap();
        assert_eq!(a.tokens.shape(), &[3, 2]);
    }

    #[test]
    fn average_mode_ignores_tailored_token_order() {
        let p = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 0.2, 0.0, -0.3, 1.0, 0.5]);
        let r = Tensor::<f64>::from_f64(&[3, 3], &[0.1, 0.2, 0.3, -1.0, 0.0, 2.0, 0.5, 0.5, -0.5]);
        let rp = Tensor::<f64>::from_f64(&[3, 3], &[0.5, 0.5, -0.5, 0.1, 0.2, 0.3, -1.0, 0.0, 2.0]);
        let a = fuse(&p, &r, FusionMode::Average, 1.0).unwrap();
        let b = fuse(&p, &rp, FusionMode::Average, 1.0).unwrap();
        for (x, y) in a.tokens.data().iter().zip(b.tokens.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_validation() {
        assert!(Ablation { pse: false, tle: false, fm: false }.validate().is_err());
        assert!(Ablation { pse: true, tle: false, fm: true }.validate().is_err());
        for a in [Ablation::PSE_ONLY, Ablation::TLE_ONLY, Ablation::PSE_TLE, Ablation::FULL] {
            a.validate().unwrap();
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }

    #[test]
    fn fusion_rejects_dimension_mismatch() {
        let p = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]);
        let r = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.0, 0.0]);
        assert!(fuse(&p, &r, FusionMode::Average, 1.0).is_err());
    }
}
