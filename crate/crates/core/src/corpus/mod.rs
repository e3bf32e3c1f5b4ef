//! Labelled toy corpus: image/report pairs for the common classes and one
//! exemplar per held-out rare class.

mod io;
mod probe;
mod render;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSet, VocabManifest};
use crate::error::{Error, Result};
use crate::grammar::format_report;
use crate::nn::Tensor;
use crate::rng;
use crate::scalar::Scalar;

pub use io::{load_corpus, read_png, save_corpus, write_png, CorpusRecord, SIDECAR};
pub use probe::{probe, probe_features, ProbeFeatures};
pub use render::{render_scene, Nuisance, NuisanceRanges, SceneSpec, MIN_SIZE};

/// One common-class training pair.
#[derive(Clone, Debug)]
pub struct CorpusPair<S: Scalar> {
    pub image: Tensor<S>,
    pub report: String,
    pub attributes: AttributeSet,
    pub spec: SceneSpec,
}

/// The single image available for a rare class. `hidden_attributes` is
/// ground truth for tests only; no model-side code reads it.
#[derive(Clone, Debug)]
pub struct RareExemplar<S: Scalar> {
    pub image: Tensor<S>,
    pub class_name: String,
    pub hidden_attributes: AttributeSet,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub ranges: NuisanceRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n: 4096, size: 32, seed: 0, ranges: NuisanceRanges::default() }
    }
}

/// Attribute combinations available to the common corpus.
pub fn common_combinations(holdout: &[AttributeSet]) -> Vec<AttributeSet> {
    AttributeSet::all().filter(|a| !holdout.contains(a)).collect()
}

/// Scene for item `index` of a corpus: combination and nuisance draws come
/// from a per-index stream.
pub fn corpus_scene(cfg: &CorpusConfig, allowed: &[AttributeSet], index: usize) -> SceneSpec {
    let mut r = rng::stream(cfg.seed, "corpus", index as u64);
    let attributes = *allowed.choose(&mut r).expect("nonempty combination list");
    let nuisance = cfg.ranges.sample(&mut r);
    SceneSpec { attributes, nuisance, seed: rng::derive_seed(cfg.seed, "texture", index as u64) }
}

pub fn make_corpus<S: Scalar>(cfg: &CorpusConfig, vocab: &VocabManifest, holdout: &[AttributeSet]) -> Result<Vec<CorpusPair<S>>> {
    vocab.validate()?;
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let allowed = common_combinations(holdout);
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("held-out set covers every attribute combination".into()));
    }
    (0..cfg.n)
        .map(|i| {
            let spec = corpus_scene(cfg, &allowed, i);
            Ok(CorpusPair {
                image: render_scene(&spec, cfg.size)?,
                report: format_report(&spec.attributes),
                attributes: spec.attributes,
                spec,
            })
        })
        .collect()
}

/// Render the exemplar of a held-out class. `attrs` must be one of the
/// manifest's rare classes, hence absent from every common corpus.
pub fn make_rare_exemplar<S: Scalar>(
    class_name: &str,
    attrs: AttributeSet,
    vocab: &VocabManifest,
    ranges: &NuisanceRanges,
    size: usize,
    seed: u64,
) -> Result<RareExemplar<S>> {
    if !vocab.holdouts().contains(&attrs) {
        return Err(Error::InvalidArgument(format!(
            "{class_name}: combination {attrs:?} is not held out of the common corpus"
        )));
    }
    let mut r = rng::stream(seed, &format!("exemplar/{class_name}"), 0);
    let spec = SceneSpec {
        attributes: attrs,
        nuisance: ranges.sample(&mut r),
        seed: rng::derive_seed(seed, &format!("exemplar-texture/{class_name}"), 0),
    };
    Ok(RareExemplar {
        image: render_scene(&spec, size)?,
        class_name: class_name.to_string(),
        hidden_attributes: attrs,
        spec,
    })
}

/// Exemplars for every rare class in the manifest.
pub fn rare_exemplars<S: Scalar>(vocab: &VocabManifest, size: usize, seed: u64) -> Result<Vec<RareExemplar<S>>> {
    vocab
        .rare
        .iter()
        .map(|rc| make_rare_exemplar(&rc.name, rc.attributes, vocab, &NuisanceRanges::default(), size, seed))
        .collect()
}

/// Fresh renders of a rare class under the corpus nuisance ranges, for
/// held-out evaluation. Stream label keeps them disjoint from the exemplar.
pub fn rare_test_renders<S: Scalar>(attrs: AttributeSet, n: usize, size: usize, seed: u64) -> Result<Vec<Tensor<S>>> {
    let ranges = NuisanceRanges::default();
    (0..n)
        .map(|i| {
            let label = format!("rare-test/{}", attrs.combination_id());
            let mut r = rng::stream(seed, &label, i as u64);
            let spec = SceneSpec {
                attributes: attrs,
                nuisance: ranges.sample(&mut r),
                seed: rng::derive_seed(seed, &format!("{label}/texture"), i as u64),
            };
            render_scene(&spec, size)
        })
        .collect()
}
