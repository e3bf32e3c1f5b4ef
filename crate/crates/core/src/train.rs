//! Training loops for the denoiser alone and for the joint
//! alignment-plus-denoising objective.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AttributeBranches, TextEncoder, Token};
use crate::attributes::AttributeKind;
use crate::corpus::CorpusPair;
use crate::diffusion::{add_noise_at, gaussian, prediction_target, Denoiser, NoiseSchedule, Prediction};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Exponential moving average of the weights, swapped in when training
    /// ends; 0 keeps the raw weights.
    #[serde(default)]
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch: 32, lr: 1e-3, seed: 0, ema_decay: 0.0, cosine_lr: false }
    }
}

impl TrainConfig {
    /// Learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_lr || self.steps == 0 {
            return self.lr;
        }
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
    }
}

/// Running average of every tensor in a store.
struct Ema<S> {
    decay: f64,
    avg: Vec<Vec<S>>,
}

impl<S: Scalar> Ema<S> {
    fn new(decay: f64, store: &ParamStore<S>) -> Self {
        Self { decay, avg: store.ids().map(|id| store.get(id).data().to_vec()).collect() }
    }

    fn update(&mut self, store: &ParamStore<S>, step: usize) {
        // short warmup so early averages are not dominated by the init
        let d = S::c(self.decay.min((1 + step) as f64 / (10 + step) as f64));
        let one = S::one();
        for (a, id) in self.avg.iter_mut().zip(store.ids()) {
            for (x, &p) in a.iter_mut().zip(store.get(id).data()) {
                *x = d * *x + (one - d) * p;
            }
        }
    }

    fn write(self, store: &mut ParamStore<S>) {
        for (dst, src) in store.slices_mut().into_iter().zip(self.avg) {
            dst.copy_from_slice(&src);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub train: TrainConfig,
    /// Weight of the denoising term.
    pub lambda: f64,
    /// Weight of the alignment term; 0 reduces to plain denoiser training.
    pub align_weight: f64,
    /// Unit-normalize both sides before the squared distance.
    pub unit_norm: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { train: TrainConfig { steps: 2000, ..TrainConfig::default() }, lambda: 1.0, align_weight: 1.0, unit_norm: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub ldm: f64,
    pub align: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<LossRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ldm,align,total\n");
        for r in &self.rows {
            let align = r.align.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.step, r.ldm, align, r.total);
        }
        s
    }

    fn mean_of(&self, range: std::ops::Range<usize>, f: impl Fn(&LossRow) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self.rows[range.start.min(self.rows.len())..range.end.min(self.rows.len())]
            .iter()
            .filter_map(f)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean denoising loss over a step range.
    pub fn ldm_mean(&self, range: std::ops::Range<usize>) -> f64 {
        self.mean_of(range, |r| Some(r.ldm))
    }

    /// Mean alignment loss over a step range.
    pub fn align_mean(&self, range: std::ops::Range<usize>) -> f64 {
        self.mean_of(range, |r| r.align)
    }
}

/// Pre-tokenized corpus view.
struct Prepared<'a, S: Scalar> {
    corpus: &'a [CorpusPair<S>],
    tokens: Vec<Vec<Token>>,
    attr_ids: Vec<[usize; 4]>,
}

impl<'a, S: Scalar> Prepared<'a, S> {
    fn new(corpus: &'a [CorpusPair<S>], text: &TextEncoder<S>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        let tokens = corpus.iter().map(|p| text.tokenize(&p.report)).collect();
        let attr_ids = corpus
            .iter()
            .map(|p| AttributeKind::ALL.map(|k| text.word_id(p.attributes.token(k)).expect("attribute words in table")))
            .collect();
        Ok(Self { corpus, tokens, attr_ids })
    }
}

struct Batch<S: Scalar> {
    idx: Vec<usize>,
    x0: Tensor<S>,
    zt: Tensor<S>,
    /// What the network output is regressed onto.
    target: Tensor<S>,
    ts: Vec<usize>,
}

fn draw_batch<S: Scalar>(
    p: &Prepared<S>,
    sched: &NoiseSchedule<S>,
    cfg: &TrainConfig,
    kind: Prediction,
    step: usize,
) -> Result<Batch<S>> {
    let mut r = rng::stream(cfg.seed, "train/batch", step as u64);
    let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..p.corpus.len())).collect();
    let ts: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..sched.steps())).collect();
    let x0 = Tensor::stack(&idx.iter().map(|&i| p.corpus[i].image.clone()).collect::<Vec<_>>());
    let eps: Tensor<S> = gaussian(x0.shape(), &mut r);
    let per = x0.len() / cfg.batch;
    let mut zt = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        let range = b * per..(b + 1) * per;
        let a = Tensor::new(&[per], x0.data()[range.clone()].to_vec());
        let e = Tensor::new(&[per], eps.data()[range].to_vec());
        zt.extend(add_noise_at(&a, &e, sched.alpha_bar(t))?.into_data());
    }
    let zt = Tensor::new(x0.shape(), zt);
    let abs: Vec<S> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
    let target = prediction_target(kind, &x0, &eps, &abs);
    Ok(Batch { idx, x0, zt, target, ts })
}

fn check_finite(v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Train the denoiser on the noise-prediction objective. The text encoder
/// is trained jointly unless its store is frozen, in which case it is left
/// untouched.
pub fn train_denoiser<S: Scalar>(
    den: &mut Denoiser<S>,
    text: &mut TextEncoder<S>,
    corpus: &[CorpusPair<S>],
    sched: &NoiseSchedule<S>,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    let cfg = AlignConfig { train: cfg.clone(), lambda: 1.0, align_weight: 0.0, unit_norm: true };
    run(den, text, None, corpus, sched, &cfg)
}

/// Joint objective `align_weight * sum_k |v_k - e_k|^2 + lambda * ldm`,
/// warm-starting from whatever state the three models are in.
pub fn train_aligned<S: Scalar>(
    den: &mut Denoiser<S>,
    text: &mut TextEncoder<S>,
    branches: &mut AttributeBranches<S>,
    corpus: &[CorpusPair<S>],
    sched: &NoiseSchedule<S>,
    cfg: &AlignConfig,
) -> Result<LossCurve> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    run(den, text, Some(branches), corpus, sched, cfg)
}

/// Graph of the combined loss for one batch; returns `(total, ldm, align)`.
fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    den: &Denoiser<S>,
    text: &TextEncoder<S>,
    branches: Option<&AttributeBranches<S>>,
    p: &Prepared<S>,
    batch: &Batch<S>,
    cfg: &AlignConfig,
) -> Result<(crate::nn::Var, crate::nn::Var, Option<crate::nn::Var>)> {
    let seqs: Vec<Vec<Token>> = batch.idx.iter().map(|&i| p.tokens[i].clone()).collect();
    let cond = text.encode_graph(g, &seqs)?;
    let zt = g.constant(batch.zt.clone());
    let target = g.constant(batch.target.clone());
    let pred = den.forward(g, zt, &batch.ts, cond);
    let ldm = g.mse(pred, target);
    let weighted_ldm = g.scale(ldm, S::c(cfg.lambda));
    let (total, align) = match branches {
        Some(br) if cfg.align_weight > 0.0 => {
            let x0 = g.constant(batch.x0.clone());
            let vs = br.forward(g, x0, cfg.unit_norm)?;
            let d = S::c(text.dim() as f64);
            let mut align = None;
            for (k, v) in vs.into_iter().enumerate() {
                let ids: Vec<usize> = batch.idx.iter().map(|&i| p.attr_ids[i][k]).collect();
                let e = text.attribute_graph(g, &ids, cfg.unit_norm);
                // mean over batch of the squared distance = mse * D
                let term = g.mse(v, e);
                let term = g.scale(term, d);
                align = Some(match align {
                    None => term,
                    Some(a) => g.add(a, term),
                });
            }
            let align = align.expect("four attributes");
            let w = g.scale(align, S::c(cfg.align_weight));
            (g.add(w, weighted_ldm), Some(align))
        }
        _ => (weighted_ldm, None),
    };
    Ok((total, ldm, align))
}

fn run<S: Scalar>(
    den: &mut Denoiser<S>,
    text: &mut TextEncoder<S>,
    mut branches: Option<&mut AttributeBranches<S>>,
    corpus: &[CorpusPair<S>],
    sched: &NoiseSchedule<S>,
    cfg: &AlignConfig,
) -> Result<LossCurve> {
    let tc = &cfg.train;
    if tc.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let prepared = Prepared::new(corpus, text)?;
    let mut opt_den = Adam::new(tc.lr);
    let mut opt_text = Adam::new(tc.lr);
    let mut opt_br = Adam::new(tc.lr);
    let mut curve = LossCurve::default();
    let ema_on = tc.ema_decay > 0.0;
    let mut ema_den = (ema_on && !den.params().is_frozen()).then(|| Ema::new(tc.ema_decay, den.params()));
    let mut ema_text = (ema_on && !text.params().is_frozen()).then(|| Ema::new(tc.ema_decay, text.params()));
    let mut ema_br = branches
        .as_deref()
        .filter(|b| ema_on && !b.params().is_frozen())
        .map(|b| Ema::new(tc.ema_decay, b.params()));
    for step in 0..tc.steps {
        let lr = tc.lr_at(step);
        opt_den.lr = lr;
        opt_text.lr = lr;
        opt_br.lr = lr;
        let batch = draw_batch(&prepared, sched, tc, den.config().prediction, step)?;
        let mut g = Graph::new();
        let (total, ldm, align) = batch_loss(&mut g, den, text, branches.as_deref(), &prepared, &batch, cfg)?;
        let row = LossRow {
            step,
            ldm: g.value(ldm).data()[0].f64(),
            align: align.map(|a| g.value(a).data()[0].f64()),
            total: g.value(total).data()[0].f64(),
        };
        check_finite(row.total, step)?;
        g.backward(total);
        if !den.params().is_frozen() {
            let grads = g.param_grads(den.params());
            opt_den.step(den.params_mut(), &grads);
        }
        if !text.params().is_frozen() {
            let grads = g.param_grads(text.params());
            opt_text.step(text.params_mut(), &grads);
        }
        if let Some(br) = branches.as_deref_mut() {
            if !br.params().is_frozen() {
                let grads = g.param_grads(br.params());
                opt_br.step(br.params_mut(), &grads);
            }
        }
        if let Some(e) = ema_den.as_mut() {
            e.update(den.params(), step);
        }
        if let Some(e) = ema_text.as_mut() {
            e.update(text.params(), step);
        }
        if let (Some(e), Some(br)) = (ema_br.as_mut(), branches.as_deref()) {
            e.update(br.params(), step);
        }
        if step % 250 == 0 {
            log::debug!("step {step}: ldm {:.4} align {:?}", row.ldm, row.align);
        }
        curve.rows.push(row);
    }
    if let Some(e) = ema_den {
        e.write(den.params_mut());
    }
    if let Some(e) = ema_text {
        e.write(text.params_mut());
    }
    if let (Some(e), Some(br)) = (ema_br, branches) {
        e.write(br.params_mut());
    }
    Ok(curve)
}

/// Combined loss of one fixed batch as a plain number, for finite-difference
/// checks against the tape gradients.
#[doc(hidden)]
pub fn probe_loss<S: Scalar>(
    den: &Denoiser<S>,
    text: &TextEncoder<S>,
    branches: Option<&AttributeBranches<S>>,
    corpus: &[CorpusPair<S>],
    sched: &NoiseSchedule<S>,
    cfg: &AlignConfig,
) -> Result<(f64, Graph<S>)> {
    let prepared = Prepared::new(corpus, text)?;
    let batch = draw_batch(&prepared, sched, &cfg.train, den.config().prediction, 0)?;
    let mut g = Graph::new();
    let (total, _, _) = batch_loss(&mut g, den, text, branches, &prepared, &batch, cfg)?;
    let v = g.value(total).data()[0].f64();
    g.backward(total);
    Ok((v, g))
}
