//! Data plumbing shared by the pipeline driver and the acceptance checks:
//! benchmark splits, probe scoring of generated sets and the per-class
//! one-shot run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AttributeBranches, TextEncoder};
use crate::attributes::{AttributeKind, AttributeSet, RareClass, VOCAB_SIZE};
use crate::corpus::{probe, render_scene, CorpusPair, NuisanceRanges, RareExemplar, SceneSpec};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::bench::{traditional_augment, LabelledSet};
use crate::nn::Tensor;
use crate::oneshot::{
    build_tailored, optimize_prototype, synthesize_rare, Ablation, PrototypeConfig, PrototypeEmbedding, SynthSample,
    SynthesisConfig, TailoredEmbedding,
};
use crate::rng;
use crate::scalar::Scalar;

/// The three trained networks.
#[derive(Clone, Debug)]
pub struct Models<S: Scalar> {
    pub denoiser: Denoiser<S>,
    pub text: TextEncoder<S>,
    pub branches: AttributeBranches<S>,
}

impl<S: Scalar> Models<S> {
    pub fn freeze(&mut self) {
        self.denoiser.params_mut().freeze();
        self.text.params_mut().freeze();
        self.branches.params_mut().freeze();
    }

    /// Parameter hashes of denoiser, text encoder and branches.
    pub fn hashes(&self) -> [String; 3] {
        [self.denoiser.params().hash(), self.text.params().hash(), self.branches.params().hash()]
    }
}

/// Morphology and pathology carry a lesion's identity in the renderer.
pub fn identity(a: &AttributeSet) -> (usize, usize) {
    (a.morphology.index(), a.pathology.index())
}

/// Fraction of images whose probed morphology and pathology match `attrs`.
/// Frames without a visible lesion count as misses.
pub fn identity_recovery<S: Scalar>(images: &[Tensor<S>], attrs: &AttributeSet) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = images
        .iter()
        .filter(|im| probe(*im).map(|got| identity(&got) == identity(attrs)).unwrap_or(false))
        .count();
    hits as f64 / images.len() as f64
}

/// Renders that keep the identity slots of `attrs` and draw the other two
/// uniformly. `label` names the random stream.
pub fn entity_renders<S: Scalar>(attrs: &AttributeSet, n: usize, size: usize, seed: u64, label: &str) -> Result<Vec<Tensor<S>>> {
    let ranges = NuisanceRanges::default();
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, label, i as u64);
            let a = attrs
                .with(AttributeKind::Color, r.random_range(0..VOCAB_SIZE))
                .with(AttributeKind::Location, r.random_range(0..VOCAB_SIZE));
            let spec = SceneSpec { attributes: a, nuisance: ranges.sample(&mut r), seed: r.random() };
            render_scene(&spec, size)
        })
        .collect()
}

/// Renders whose identity pair differs from every rare class.
pub fn background_renders<S: Scalar>(rare: &[RareClass], n: usize, size: usize, seed: u64, label: &str) -> Result<Vec<Tensor<S>>> {
    let ranges = NuisanceRanges::default();
    let taken: Vec<(usize, usize)> = rare.iter().map(|c| identity(&c.attributes)).collect();
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let mut r = rng::stream(seed, label, i);
        i += 1;
        let a = AttributeSet::from_indices([
            r.random_range(0..VOCAB_SIZE),
            r.random_range(0..VOCAB_SIZE),
            r.random_range(0..VOCAB_SIZE),
            r.random_range(0..VOCAB_SIZE),
        ]);
        if taken.contains(&identity(&a)) {
            continue;
        }
        let spec = SceneSpec { attributes: a, nuisance: ranges.sample(&mut r), seed: r.random() };
        out.push(render_scene(&spec, size)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchDataConfig {
    /// Corpus images used as the background class during training.
    pub background_train: usize,
    pub positives_per_entity: usize,
    pub background_test: usize,
    pub traditional_per_entity: usize,
    pub seed: u64,
}

impl Default for BenchDataConfig {
    fn default() -> Self {
        Self { background_train: 256, positives_per_entity: 40, background_test: 160, traditional_per_entity: 64, seed: 7 }
    }
}

/// Training and test splits of the rare-lesion benchmark. Label `k` is
/// rare class `k`; label `entities.len()` is the background class.
#[derive(Clone, Debug)]
pub struct BenchData<S: Scalar> {
    pub entities: Vec<String>,
    pub real_train: LabelledSet<S>,
    pub test: LabelledSet<S>,
}

pub fn bench_data<S: Scalar>(
    corpus: &[CorpusPair<S>],
    rare: &[RareClass],
    exemplars: &[RareExemplar<S>],
    cfg: &BenchDataConfig,
) -> Result<BenchData<S>> {
    let bg = rare.len();
    let mut real_train = LabelledSet::new();
    for (k, rc) in rare.iter().enumerate() {
        let ex = exemplars
            .iter()
            .find(|e| e.class_name == rc.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no exemplar for {}", rc.name)))?;
        real_train.push(ex.image.clone(), k);
    }
    let taken: Vec<(usize, usize)> = rare.iter().map(|c| identity(&c.attributes)).collect();
    let background: Vec<&CorpusPair<S>> =
        corpus.iter().filter(|p| !taken.contains(&identity(&p.attributes))).take(cfg.background_train).collect();
    if background.len() < cfg.background_train {
        return Err(Error::InvalidArgument("corpus too small for the background class".into()));
    }
    for p in background {
        real_train.push(p.image.clone(), bg);
    }
    let size = exemplars.first().map(|e| e.image.shape()[0]).unwrap_or(32);
    let mut test = LabelledSet::new();
    for (k, rc) in rare.iter().enumerate() {
        for im in entity_renders(&rc.attributes, cfg.positives_per_entity, size, cfg.seed, &format!("bench-test/{}", rc.name))? {
            test.push(im, k);
        }
    }
    for im in background_renders(rare, cfg.background_test, size, cfg.seed, "bench-test/background")? {
        test.push(im, bg);
    }
    Ok(BenchData { entities: rare.iter().map(|r| r.name.clone()).collect(), real_train, test })
}

/// Flip/crop/jitter copies of every exemplar, labelled by class.
pub fn traditional_set<S: Scalar>(data: &BenchData<S>, per_entity: usize, seed: u64) -> LabelledSet<S> {
    let mut out = LabelledSet::new();
    for (im, &l) in data.real_train.images.iter().zip(&data.real_train.labels) {
        if l < data.entities.len() {
            for a in traditional_augment(im, per_entity, rng::derive_seed(seed, "traditional", l as u64)) {
                out.push(a, l);
            }
        }
    }
    out
}

/// Prototype and tailored embedding of one rare class.
#[derive(Clone, Debug)]
pub struct OneShotClass<S: Scalar> {
    pub class_name: String,
    pub hidden_attributes: AttributeSet,
    pub prototype: PrototypeEmbedding<S>,
    pub tailored: TailoredEmbedding<S>,
}

/// Invert the exemplar and decode its attributes. `models` must be frozen.
pub fn prepare_class<S: Scalar>(
    exemplar: &RareExemplar<S>,
    models: &Models<S>,
    sched: &NoiseSchedule<S>,
    cfg: &PrototypeConfig,
) -> Result<OneShotClass<S>> {
    let prototype = optimize_prototype(&exemplar.image, &exemplar.class_name, &models.denoiser, &models.text, sched, cfg)?;
    let tailored = build_tailored(&exemplar.image, &models.branches, &models.text)?;
    Ok(OneShotClass {
        class_name: exemplar.class_name.clone(),
        hidden_attributes: exemplar.hidden_attributes,
        prototype,
        tailored,
    })
}

/// Generated set of one class under one ablation.
pub fn synthesize_class<S: Scalar>(
    class: &OneShotClass<S>,
    ablation: Ablation,
    models: &Models<S>,
    sched: &NoiseSchedule<S>,
    cfg: &SynthesisConfig,
) -> Result<Vec<SynthSample<S>>> {
    synthesize_rare(&class.prototype, Some(&class.tailored), ablation, &models.denoiser, &models.text, sched, cfg)
}

/// Synthetic images of every class, labelled for the benchmark.
pub fn synthetic_set<S: Scalar>(entities: &[String], sets: &[(String, Vec<SynthSample<S>>)]) -> Result<LabelledSet<S>> {
    let mut out = LabelledSet::new();
    for (name, samples) in sets {
        let k = entities
            .iter()
            .position(|e| e == name)
            .ok_or_else(|| Error::InvalidArgument(format!("synthetic set for unknown class {name}")))?;
        for s in samples {
            out.push(s.image.clone(), k);
        }
    }
    Ok(out)
}
