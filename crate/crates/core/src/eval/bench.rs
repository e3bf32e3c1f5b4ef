//! Downstream augmentation benchmark: a small CNN classifier trained per
//! (strategy, seed) and scored one-vs-rest on a held-out test set.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::curves::{pauc, pr_auc, roc_auc, tpr_at_fpr, ScoredSampleSet};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Graph, Linear, ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 32], steps: 300, batch: 40, lr: 2e-3 }
    }
}

/// Three stride-2 convolutions and a linear read-out.
pub struct Classifier<S: Scalar> {
    params: ParamStore<S>,
    convs: Vec<Conv2d>,
    head: Linear,
    classes: usize,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(cfg: &ClassifierConfig, image_size: usize, channels: usize, classes: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = channels;
        let convs = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut params, &format!("cls.conv{i}"), cin, c, 3, 2, 1, &mut r);
                cin = c;
                conv
            })
            .collect();
        let side = image_size >> cfg.widths.len();
        let head = Linear::new(&mut params, "cls.head", side * side * cin, classes, true, &mut r);
        Self { params, convs, head, classes }
    }

    fn logits(&self, g: &mut Graph<S>, x: crate::nn::Var) -> crate::nn::Var {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, &self.params, h);
            h = g.relu(y);
        }
        let b = g.shape(h)[0];
        let n: usize = g.shape(h)[1..].iter().product();
        let flat = g.reshape(h, &[b, n]);
        self.head.forward(g, &self.params, flat)
    }

    /// Class-balanced training: each draw picks a class uniformly, then an
    /// example of that class.
    pub fn fit(&mut self, images: &[Tensor<S>], labels: &[usize], cfg: &ClassifierConfig, seed: u64) -> Result<()> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let present: Vec<usize> = (0..self.classes).filter(|&c| !by_class[c].is_empty()).collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument("classifier training set is empty".into()));
        }
        let mut opt = Adam::new(cfg.lr);
        for step in 0..cfg.steps {
            let mut r = rng::stream(seed, "classifier/batch", step as u64);
            let picks: Vec<usize> = (0..cfg.batch)
                .map(|_| {
                    let c = present[r.random_range(0..present.len())];
                    by_class[c][r.random_range(0..by_class[c].len())]
                })
                .collect();
            let x = Tensor::stack(&picks.iter().map(|&i| images[i].clone()).collect::<Vec<_>>());
            let y: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = self.logits(&mut g, xv);
            let loss = g.softmax_xent(logits, &y, None);
            if !g.value(loss).data()[0].f64().is_finite() {
                return Err(Error::Diverged { step });
            }
            g.backward(loss);
            let grads = g.param_grads(&self.params);
            opt.step(&mut self.params, &grads);
        }
        Ok(())
    }

    /// Softmax probabilities, one row per image.
    pub fn predict(&self, images: &[Tensor<S>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::stack(chunk));
            let l = self.logits(&mut g, x);
            let lv = g.value(l);
            for i in 0..chunk.len() {
                let row: Vec<f64> = lv.row(i).iter().map(|v| v.f64()).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                out.push(e.into_iter().map(|v| v / z).collect());
            }
        }
        out
    }
}

/// Labelled images. Labels index `entities`, with the last label reserved
/// for the background ("common") class.
#[derive(Clone, Debug)]
pub struct LabelledSet<S: Scalar> {
    pub images: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> LabelledSet<S> {
    pub fn new() -> Self {
        Self { images: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, image: Tensor<S>, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &LabelledSet<S>) {
        self.images.extend(other.images.iter().cloned());
        self.labels.extend(other.labels.iter().copied());
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl<S: Scalar> Default for LabelledSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn image_hash<S: Scalar>(t: &Tensor<S>) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut buf = Vec::with_capacity(t.len() * S::BYTES);
    for v in t.data() {
        v.write_le(&mut buf);
    }
    h.update(&buf);
    h.finalize().into()
}

/// Fails if any test image also occurs in a training set.
pub fn leakage_check<S: Scalar>(train: &[&LabelledSet<S>], test: &LabelledSet<S>) -> Result<()> {
    let seen: HashSet<[u8; 32]> = train.iter().flat_map(|s| s.images.iter().map(image_hash)).collect();
    let leaked = test.images.iter().filter(|t| seen.contains(&image_hash(*t))).count();
    if leaked > 0 {
        return Err(Error::InvalidArgument(format!("{leaked} test images also appear in training data")));
    }
    Ok(())
}

/// Metrics of one entity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityMetrics {
    pub pr_auc: f64,
    pub roc_auc: f64,
    pub tpr_at_20_fpr: f64,
    pub pauc_0_20: f64,
}

impl EntityMetrics {
    fn from_scores(s: &ScoredSampleSet) -> Result<Self> {
        Ok(Self {
            pr_auc: pr_auc(s)?,
            roc_auc: roc_auc(s)?,
            tpr_at_20_fpr: tpr_at_fpr(s, 0.2, false)?,
            pauc_0_20: pauc(s, 0.0, 0.2)?,
        })
    }

    fn fields(&self) -> [f64; 4] {
        [self.pr_auc, self.roc_auc, self.tpr_at_20_fpr, self.pauc_0_20]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self { pr_auc: f[0], roc_auc: f[1], tpr_at_20_fpr: f[2], pauc_0_20: f[3] }
    }

    /// Unweighted mean of several entities.
    pub fn mean(items: &[EntityMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 4];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.fields()) {
                *a += v;
            }
        }
        Self::from_fields(acc.map(|a| a / n))
    }

    fn sd(items: &[EntityMetrics]) -> Self {
        let mean = Self::mean(items).fields();
        let n = items.len();
        if n < 2 {
            return Self::default();
        }
        let mut acc = [0.0; 4];
        for m in items {
            for ((a, v), mu) in acc.iter_mut().zip(m.fields()).zip(mean) {
                *a += (v - mu).powi(2);
            }
        }
        Self::from_fields(acc.map(|a| (a / (n - 1) as f64).sqrt()))
    }
}

/// One (strategy, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub entities: BTreeMap<String, EntityMetrics>,
    pub macro_avg: EntityMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub entity_mean: BTreeMap<String, EntityMetrics>,
    pub entity_sd: BTreeMap<String, EntityMetrics>,
    pub macro_mean: EntityMetrics,
    pub macro_sd: EntityMetrics,
}

impl BenchReport {
    /// Macro fields equal the unweighted entity means, per seed.
    pub fn check_consistency(&self) -> Result<()> {
        for r in &self.per_seed {
            let ents: Vec<EntityMetrics> = r.entities.values().copied().collect();
            let m = EntityMetrics::mean(&ents);
            if m.fields().iter().zip(r.macro_avg.fields()).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::Format(format!("{} seed {}: macro average inconsistent", self.strategy, r.seed)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat per-entity rows: strategy, seed, entity, metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seed,entity,pr_auc,roc_auc,tpr_at_20_fpr,pauc_0_20\n");
        for r in &self.per_seed {
            let rows = r.entities.iter().map(|(e, m)| (e.as_str(), m)).chain(std::iter::once(("macro", &r.macro_avg)));
            for (e, m) in rows {
                let _ = writeln!(
                    s,
                    "{},{},{e},{:.6},{:.6},{:.6},{:.6}",
                    self.strategy, r.seed, m.pr_auc, m.roc_auc, m.tpr_at_20_fpr, m.pauc_0_20
                );
            }
        }
        s
    }
}

/// Train one classifier per seed on `real_train` plus `extra` and score the
/// rare entities one-vs-rest on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_strategy<S: Scalar>(
    strategy: &str,
    entities: &[String],
    real_train: &LabelledSet<S>,
    extra: &LabelledSet<S>,
    test: &LabelledSet<S>,
    cfg: &ClassifierConfig,
    seeds: &[u64],
    fingerprint: &str,
) -> Result<BenchReport> {
    leakage_check(&[real_train, extra], test)?;
    let classes = entities.len() + 1;
    let mut train = real_train.clone();
    train.extend(extra);
    let shape = train.images.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?.shape().to_vec();
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut clf = Classifier::<S>::new(cfg, shape[0], shape[2], classes, rng::derive_seed(seed, "classifier/init", 0));
        clf.fit(&train.images, &train.labels, cfg, seed)?;
        let probs = clf.predict(&test.images);
        let mut ents = BTreeMap::new();
        for (k, e) in entities.iter().enumerate() {
            let scored = ScoredSampleSet::new(
                e.clone(),
                probs.iter().zip(&test.labels).map(|(p, &l)| (p[k], l == k)).collect(),
            );
            ents.insert(e.clone(), EntityMetrics::from_scores(&scored)?);
        }
        let macro_avg = EntityMetrics::mean(&ents.values().copied().collect::<Vec<_>>());
        per_seed.push(SeedResult { seed, entities: ents, macro_avg });
    }
    let collect = |e: &str| per_seed.iter().map(|r| r.entities[e]).collect::<Vec<_>>();
    let entity_mean = entities.iter().map(|e| (e.clone(), EntityMetrics::mean(&collect(e)))).collect();
    let entity_sd = entities.iter().map(|e| (e.clone(), EntityMetrics::sd(&collect(e)))).collect();
    let macros: Vec<EntityMetrics> = per_seed.iter().map(|r| r.macro_avg).collect();
    let report = BenchReport {
        strategy: strategy.to_string(),
        fingerprint: fingerprint.to_string(),
        seeds: seeds.to_vec(),
        per_seed,
        entity_mean,
        entity_sd,
        macro_mean: EntityMetrics::mean(&macros),
        macro_sd: EntityMetrics::sd(&macros),
    };
    report.check_consistency()?;
    Ok(report)
}

/// Flips, shifted crops and per-channel gain jitter of one exemplar.
pub fn traditional_augment<S: Scalar>(image: &Tensor<S>, n: usize, seed: u64) -> Vec<Tensor<S>> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, "traditional", i as u64);
            let flip_x = r.random_bool(0.5);
            let flip_y = r.random_bool(0.5);
            let dx: i64 = r.random_range(-3..=3);
            let dy: i64 = r.random_range(-3..=3);
            let gains: Vec<f64> = (0..c).map(|_| r.random_range(0.8..1.2)).collect();
            let mut out = Vec::with_capacity(image.len());
            for y in 0..h {
                for x in 0..w {
                    // crop-and-pad shift with edge replication
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = if flip_x { w - 1 - sx } else { sx };
                    let sy = if flip_y { h - 1 - sy } else { sy };
                    for ch in 0..c {
                        let v = image.data()[(sy * w + sx) * c + ch].f64();
                        let v = ((v + 1.0) * 0.5 * gains[ch]).clamp(0.0, 1.0) * 2.0 - 1.0;
                        out.push(S::c(v));
                    }
                }
            }
            Tensor::new(s, out)
        })
        .collect()
}
