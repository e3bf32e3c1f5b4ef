//! Run configuration: one TOML document with a section per stage.
//!
//! Every stage derives its seeds from the root `seed` and its own stage
//! name, so changing the root seed changes every stream while stage
//! sections stay seed-free.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rarelab::align::{BranchConfig, TextEncoderConfig};
use rarelab::train::AlignConfig;
use rarelab::attributes::AttributeKind;
use rarelab::corpus::{CorpusConfig, NuisanceRanges};
use rarelab::diffusion::DenoiserConfig;
use rarelab::eval::bench::ClassifierConfig;
use rarelab::experiment::BenchDataConfig;
use rarelab::oneshot::{Ablation, FusionMode, PrototypeConfig, SynthesisConfig, VaryPolicy};
use rarelab::rng::derive_seed;
use rarelab::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n: usize,
    pub size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { n: 4096, size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub denoiser: DenoiserConfig,
    pub text: TextEncoderConfig,
    pub branches: BranchConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { denoiser: DenoiserConfig::default(), text: TextEncoderConfig::default(), branches: BranchConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cosine_lr: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cosine_lr: bool,
    pub lambda: f64,
    pub align_weight: f64,
    pub unit_norm: bool,
    /// Fresh renders used to score attribute decoding after training.
    pub heldout: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        let a = AlignConfig::default();
        Self {
            steps: a.train.steps,
            batch: a.train.batch,
            lr: a.train.lr,
            ema_decay: 0.999,
            cosine_lr: true,
            lambda: a.lambda,
            align_weight: a.align_weight,
            unit_norm: a.unit_norm,
            heldout: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub tokens: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for InvertSection {
    fn default() -> Self {
        let p = PrototypeConfig::default();
        Self { tokens: p.tokens, steps: p.steps, batch: p.batch, lr: p.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeSection {
    pub n: usize,
    pub sampler_steps: usize,
    pub sigma: f64,
    pub fusion: FusionMode,
    pub temperature: f64,
    pub vary: Vec<AttributeKind>,
    pub resample_per_image: bool,
    pub batch: usize,
    /// Ablation settings to generate, by name.
    pub ablations: Vec<String>,
    /// Replicate seeds; each gives an independent generated set.
    pub seeds: Vec<u64>,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        let s = SynthesisConfig::default();
        Self {
            n: s.n,
            sampler_steps: s.sampler_steps,
            sigma: s.sigma,
            fusion: s.fusion,
            temperature: s.temperature,
            vary: s.vary.vary,
            resample_per_image: s.resample_per_image,
            batch: s.batch,
            ablations: vec!["pse_only".into(), "full".into()],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierConfig,
    pub data: BenchDataConfig,
    /// Synthesis replicate whose images feed the synthetic strategies.
    pub synth_seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            strategies: vec!["real".into(), "traditional".into(), "pse_only".into(), "full".into()],
            seeds: (0..5).collect(),
            classifier: ClassifierConfig::default(),
            data: BenchDataConfig::default(),
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub models: ModelSection,
    pub pretrain: TrainSection,
    pub align: AlignSection,
    pub invert: InvertSection,
    pub synthesize: SynthesizeSection,
    pub bench: BenchSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        // calibrated on one CPU core: EMA and the cosine decay sharpen colors
        Self { steps: 6000, batch: t.batch, lr: 2e-3, ema_decay: 0.999, cosine_lr: true }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSection::default(),
            models: ModelSection::default(),
            pretrain: TrainSection::default(),
            align: AlignSection::default(),
            invert: InvertSection::default(),
            synthesize: SynthesizeSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Canonical JSON text: object keys sorted, no insignificant whitespace.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled
    serde_json::to_value(v).expect("config serializes").to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the whole canonicalized configuration.
    pub fn fingerprint(&self) -> String {
        sha256_hex(canonical_json(self).as_bytes())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, 0)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n: self.corpus.n,
            size: self.corpus.size,
            seed: self.stage_seed("corpus"),
            ranges: NuisanceRanges::default(),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain.steps,
            batch: self.pretrain.batch,
            lr: self.pretrain.lr,
            seed: self.stage_seed("pretrain"),
            ema_decay: self.pretrain.ema_decay,
            cosine_lr: self.pretrain.cosine_lr,
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        let a = &self.align;
        AlignConfig {
            train: TrainConfig {
                steps: a.steps,
                batch: a.batch,
                lr: a.lr,
                seed: self.stage_seed("align"),
                ema_decay: a.ema_decay,
                cosine_lr: a.cosine_lr,
            },
            lambda: a.lambda,
            align_weight: a.align_weight,
            unit_norm: a.unit_norm,
        }
    }

    pub fn prototype_config(&self) -> PrototypeConfig {
        let i = &self.invert;
        PrototypeConfig { tokens: i.tokens, steps: i.steps, batch: i.batch, lr: i.lr, seed: self.stage_seed("invert") }
    }

    /// Synthesis settings of one replicate.
    pub fn synthesis_config(&self, replicate: u64) -> SynthesisConfig {
        let s = &self.synthesize;
        let seed = derive_seed(self.stage_seed("synthesize"), "replicate", replicate);
        SynthesisConfig {
            n: s.n,
            seed,
            sampler_steps: s.sampler_steps,
            sigma: s.sigma,
            fusion: s.fusion,
            temperature: s.temperature,
            vary: VaryPolicy { vary: s.vary.clone(), exclude: Vec::new(), seed: derive_seed(seed, "vary", 0) },
            resample_per_image: s.resample_per_image,
            batch: s.batch,
        }
    }

    pub fn ablations(&self) -> anyhow::Result<Vec<Ablation>> {
        self.synthesize.ablations.iter().map(|a| Ok(a.parse::<Ablation>()?)).collect()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.ablations()?;
        for s in &self.bench.strategies {
            if !matches!(s.as_str(), "real" | "traditional") {
                let a: Ablation = s.parse()?;
                anyhow::ensure!(
                    self.synthesize.ablations.iter().any(|x| x.parse::<Ablation>().ok() == Some(a)),
                    "bench strategy {s} needs ablation {} in [synthesize] ablations",
                    a.name()
                );
            }
        }
        anyhow::ensure!(
            self.synthesize.seeds.contains(&self.bench.synth_seed),
            "bench synth_seed {} is not a synthesize replicate",
            self.bench.synth_seed
        );
        Ok(())
    }
}

/// Field-level differences between two JSON documents, as dotted paths.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(&p, u, v, out),
                        (u, v) => out.push(format!("{p}: {} -> {}", show(u), show(v))),
                    }
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    fn show(v: Option<&serde_json::Value>) -> String {
        v.map(|v| v.to_string()).unwrap_or_else(|| "(missing)".into())
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}
