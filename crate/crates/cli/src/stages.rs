//! The pipeline stages. Each stage ensures its upstream stages first, so
//! asking for any stage runs (or reuses) everything it depends on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rarelab::align::{AttributeBranches, NearestDecoder, TextEncoder};
use rarelab::attributes::{AttributeKind, AttributeSet, RareClass, VocabManifest, VOCAB_SIZE};
use rarelab::corpus::{
    load_corpus, make_corpus, rare_exemplars, read_png, render_scene, save_corpus, write_png, CorpusPair, NuisanceRanges,
    RareExemplar, SceneSpec,
};
use rarelab::diffusion::{Denoiser, NoiseSchedule};
use rarelab::eval::bench::{run_strategy, BenchReport, LabelledSet};
use rarelab::eval::{feature_set, fid, image_consistency, perceptual_diversity, TrunkExtractor};
use rarelab::experiment::{
    bench_data, entity_renders, identity_recovery, prepare_class, synthesize_class, synthetic_set, traditional_set, Models,
    OneShotClass,
};
use rarelab::nn::{ParamStore, Tensor};
use rarelab::oneshot::{Ablation, PrototypeEmbedding, TailoredEmbedding};
use rarelab::rng::{self, derive_seed};
use rarelab::stats::{reader_report, read_records, table1_records};
use rarelab::train::{train_aligned, train_denoiser};

use crate::config::RunConfig;
use crate::store::{StageManifest, Store};

type S = f32;

/// A completed stage.
#[derive(Clone, Debug)]
pub struct StageOut {
    pub manifest: StageManifest,
    pub dir: PathBuf,
}

impl StageOut {
    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    fn upstream(&self) -> (String, String) {
        (self.manifest.stage.clone(), self.manifest.fingerprint.clone())
    }
}

fn upstream(list: &[&StageOut]) -> BTreeMap<String, String> {
    list.iter().map(|s| s.upstream()).collect()
}

fn write_params(path: &Path, store: &ParamStore<S>, fingerprint: &str) -> Result<()> {
    fs::write(path, store.to_bytes(fingerprint)).with_context(|| format!("writing {}", path.display()))
}

fn read_params(path: &Path, fingerprint: &str) -> Result<ParamStore<S>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (store, fp) = ParamStore::from_bytes(&bytes)?;
    ensure!(fp == fingerprint, "{} was written by stage {fp}, expected {fingerprint}", path.display());
    Ok(store)
}

/// Ground-truth side file of the rare exemplars.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExemplarRecord {
    class_name: String,
    path: String,
    hidden_attributes: AttributeSet,
    spec: SceneSpec,
}

/// One generated image on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthRecord {
    pub class_name: String,
    pub ablation: String,
    pub replicate: u64,
    pub index: usize,
    pub seed: u64,
    pub attributes: Option<AttributeSet>,
    pub condition_hash: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub class_name: String,
    pub ablation: String,
    pub replicate: u64,
    pub identity_recovery: f64,
    pub diversity: f64,
    pub consistency: f64,
    pub fid: f64,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub store: Store,
    /// Restrict one-shot stages to these rare classes (all when empty).
    pub classes: Vec<String>,
}

impl Pipeline {
    pub fn new(config: RunConfig, store: Store) -> Result<Self> {
        config.ablations()?;
        Ok(Self { config, store, classes: Vec::new() })
    }

    pub fn vocab(&self) -> VocabManifest {
        VocabManifest::default()
    }

    pub fn rare(&self) -> Result<Vec<RareClass>> {
        let v = self.vocab();
        if self.classes.is_empty() {
            return Ok(v.rare);
        }
        self.classes
            .iter()
            .map(|c| v.rare_class(c).cloned().ok_or_else(|| anyhow!("unknown rare class {c}")))
            .collect()
    }

    pub fn schedule(&self) -> NoiseSchedule<S> {
        NoiseSchedule::default_linear()
    }

    pub fn corpus(&self) -> Result<StageOut> {
        let cfg = self.config.corpus_config();
        let conf = json!({ "corpus": cfg, "vocab": self.vocab() });
        let (manifest, dir) = self.store.run_stage("corpus", conf, BTreeMap::new(), |dir| {
            let vocab = self.vocab();
            let pairs = make_corpus::<S>(&cfg, &vocab, &vocab.holdouts())?;
            save_corpus(&dir.join("corpus"), &pairs)?;
            fs::write(dir.join("vocab.toml"), vocab.to_toml())?;
            let ex_dir = dir.join("exemplars");
            fs::create_dir_all(&ex_dir)?;
            let mut recs = Vec::new();
            for ex in rare_exemplars::<S>(&vocab, cfg.size, self.config.stage_seed("exemplar"))? {
                let path = format!("exemplars/{}.png", ex.class_name);
                write_png(&dir.join(&path), &ex.image)?;
                recs.push(ExemplarRecord {
                    class_name: ex.class_name,
                    path,
                    hidden_attributes: ex.hidden_attributes,
                    spec: ex.spec,
                });
            }
            fs::write(dir.join("exemplars.json"), serde_json::to_vec_pretty(&recs)?)?;
            Ok(json!({ "pairs": pairs.len(), "exemplars": recs.len() }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn load_corpus(&self, c: &StageOut) -> Result<Vec<CorpusPair<S>>> {
        Ok(load_corpus(&c.dir.join("corpus"))?)
    }

    pub fn load_exemplars(&self, c: &StageOut) -> Result<Vec<RareExemplar<S>>> {
        let recs: Vec<ExemplarRecord> = serde_json::from_slice(&fs::read(c.dir.join("exemplars.json"))?)?;
        recs.into_iter()
            .map(|r| {
                Ok(RareExemplar {
                    image: read_png(&c.dir.join(&r.path))?,
                    class_name: r.class_name,
                    hidden_attributes: r.hidden_attributes,
                    spec: r.spec,
                })
            })
            .collect()
    }

    pub fn pretrain(&self) -> Result<StageOut> {
        let c = self.corpus()?;
        let m = &self.config.models;
        let tc = self.config.pretrain_config();
        let conf = json!({ "denoiser": m.denoiser, "text": m.text, "train": tc });
        let (manifest, dir) = self.store.run_stage("pretrain", conf.clone(), upstream(&[&c]), |dir| {
            let fp = crate::store::stage_fingerprint("pretrain", &conf, &upstream(&[&c]));
            let corpus = self.load_corpus(&c)?;
            let mut den = Denoiser::<S>::new(m.denoiser.clone())?;
            let mut text = TextEncoder::<S>::new(m.text.clone());
            let curve = train_denoiser(&mut den, &mut text, &corpus, &self.schedule(), &tc)?;
            write_params(&dir.join("denoiser.bin"), den.params(), &fp)?;
            write_params(&dir.join("text.bin"), text.params(), &fp)?;
            fs::write(dir.join("loss.csv"), curve.to_csv())?;
            let n = curve.rows.len();
            Ok(json!({ "final_ldm": curve.ldm_mean(n.saturating_sub(100)..n) }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn align(&self) -> Result<StageOut> {
        let c = self.corpus()?;
        let p = self.pretrain()?;
        let m = &self.config.models;
        let ac = self.config.align_config();
        let heldout = self.config.align.heldout;
        let conf = json!({ "branches": m.branches, "align": ac, "heldout": heldout });
        let up = upstream(&[&c, &p]);
        let (manifest, dir) = self.store.run_stage("align", conf.clone(), up.clone(), |dir| {
            let fp = crate::store::stage_fingerprint("align", &conf, &up);
            let corpus = self.load_corpus(&c)?;
            let mut den = Denoiser::from_parts(m.denoiser.clone(), read_params(&p.dir.join("denoiser.bin"), p.fingerprint())?)?;
            let mut text = TextEncoder::from_parts(m.text.clone(), read_params(&p.dir.join("text.bin"), p.fingerprint())?)?;
            let mut branches = AttributeBranches::<S>::new(m.branches.clone())?;
            let curve = train_aligned(&mut den, &mut text, &mut branches, &corpus, &self.schedule(), &ac)?;
            write_params(&dir.join("denoiser.bin"), den.params(), &fp)?;
            write_params(&dir.join("text.bin"), text.params(), &fp)?;
            write_params(&dir.join("branches.bin"), branches.params(), &fp)?;
            fs::write(dir.join("loss.csv"), curve.to_csv())?;
            let acc = heldout_decoding(&branches, &text, heldout, self.config.corpus.size, self.config.stage_seed("heldout"))?;
            let n = curve.rows.len();
            Ok(json!({
                "final_ldm": curve.ldm_mean(n.saturating_sub(100)..n),
                "final_align": curve.align_mean(n.saturating_sub(100)..n),
                "heldout_accuracy": acc,
            }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn load_models(&self, a: &StageOut) -> Result<Models<S>> {
        let m = &self.config.models;
        let fp = a.fingerprint();
        let mut models = Models {
            denoiser: Denoiser::from_parts(m.denoiser.clone(), read_params(&a.dir.join("denoiser.bin"), fp)?)?,
            text: TextEncoder::from_parts(m.text.clone(), read_params(&a.dir.join("text.bin"), fp)?)?,
            branches: AttributeBranches::from_parts(m.branches.clone(), read_params(&a.dir.join("branches.bin"), fp)?)?,
        };
        models.freeze();
        Ok(models)
    }

    /// Hashes recorded when the aligned models were written.
    fn written_hashes(&self, a: &StageOut) -> Result<[String; 3]> {
        let fp = a.fingerprint();
        let h = |f: &str| -> Result<String> { Ok(read_params(&a.dir.join(f), fp)?.hash()) };
        Ok([h("denoiser.bin")?, h("text.bin")?, h("branches.bin")?])
    }

    fn check_frozen(&self, models: &Models<S>, before: &[String; 3], what: &str) -> Result<()> {
        let after = models.hashes();
        ensure!(&after == before, "{what} changed frozen parameters: {before:?} -> {after:?}");
        Ok(())
    }

    pub fn invert(&self) -> Result<StageOut> {
        let c = self.corpus()?;
        let a = self.align()?;
        let pc = self.config.prototype_config();
        let rare = self.rare()?;
        let names: Vec<&str> = rare.iter().map(|r| r.name.as_str()).collect();
        let conf = json!({ "prototype": pc, "classes": names });
        let up = upstream(&[&c, &a]);
        let (manifest, dir) = self.store.run_stage("invert", conf.clone(), up.clone(), |dir| {
            let fp = crate::store::stage_fingerprint("invert", &conf, &up);
            let models = self.load_models(&a)?;
            let before = self.written_hashes(&a)?;
            self.check_frozen(&models, &before, "loading")?;
            let exemplars = self.load_exemplars(&c)?;
            let mut out = serde_json::Map::new();
            for rc in &rare {
                let ex = exemplars.iter().find(|e| e.class_name == rc.name).ok_or_else(|| anyhow!("no exemplar for {}", rc.name))?;
                let cls = prepare_class(ex, &models, &self.schedule(), &pc)?;
                self.check_frozen(&models, &before, "prototype optimization")?;
                let mut store = ParamStore::new();
                store.add(format!("prototype.{}", rc.name), cls.prototype.tokens.clone());
                write_params(&dir.join(format!("prototype_{}.bin", rc.name)), &store, &fp)?;
                let mut csv = String::from("step,loss\n");
                for (i, l) in cls.prototype.losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{l:.6}\n"));
                }
                fs::write(dir.join(format!("loss_{}.csv", rc.name)), csv)?;
                let l = &cls.prototype.losses;
                let head = l.iter().take(20).sum::<f64>() / l.len().clamp(1, 20) as f64;
                let tail = l.iter().rev().take(20).sum::<f64>() / l.len().clamp(1, 20) as f64;
                out.insert(
                    rc.name.clone(),
                    json!({
                        "decoded": cls.tailored.decoded_attributes,
                        "decoded_matches": cls.tailored.decoded_attributes == ex.hidden_attributes,
                        "loss_head": head,
                        "loss_tail": tail,
                    }),
                );
            }
            fs::write(dir.join("tailored.json"), serde_json::to_vec_pretty(&out)?)?;
            Ok(serde_json::Value::Object(out))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn load_classes(&self, inv: &StageOut, models: &Models<S>) -> Result<Vec<OneShotClass<S>>> {
        let c = self.corpus()?;
        let exemplars = self.load_exemplars(&c)?;
        let decoded: serde_json::Value = serde_json::from_slice(&fs::read(inv.dir.join("tailored.json"))?)?;
        let mut out = Vec::new();
        for rc in self.rare()? {
            let store = read_params(&inv.dir.join(format!("prototype_{}.bin", rc.name)), inv.fingerprint())?;
            let tokens = store.get(store.ids().next().ok_or_else(|| anyhow!("empty prototype file"))?).clone();
            let attrs: AttributeSet = serde_json::from_value(decoded[&rc.name]["decoded"].clone())?;
            let ex = exemplars.iter().find(|e| e.class_name == rc.name).ok_or_else(|| anyhow!("no exemplar for {}", rc.name))?;
            out.push(OneShotClass {
                class_name: rc.name.clone(),
                hidden_attributes: ex.hidden_attributes,
                prototype: PrototypeEmbedding {
                    class_name: rc.name.clone(),
                    tokens,
                    losses: Vec::new(),
                    optimizer: rarelab::nn::Adam::new(self.config.invert.lr),
                },
                tailored: TailoredEmbedding::from_attributes(&models.text, attrs)?,
            });
        }
        Ok(out)
    }

    pub fn synthesize(&self) -> Result<StageOut> {
        let a = self.align()?;
        let inv = self.invert()?;
        let s = &self.config.synthesize;
        let conf = json!({ "synthesize": s, "seed": self.config.stage_seed("synthesize") });
        let up = upstream(&[&a, &inv]);
        let (manifest, dir) = self.store.run_stage("synthesize", conf, up, |dir| {
            let models = self.load_models(&a)?;
            let before = self.written_hashes(&a)?;
            let classes = self.load_classes(&inv, &models)?;
            let mut lines = String::new();
            let mut count = 0usize;
            for abl in self.config.ablations()? {
                for &rep in &s.seeds {
                    let cfg = self.config.synthesis_config(rep);
                    for cls in &classes {
                        let samples = synthesize_class(cls, abl, &models, &self.schedule(), &cfg)?;
                        self.check_frozen(&models, &before, "synthesis")?;
                        let sub = format!("images/{}/r{rep}/{}", abl.name(), cls.class_name);
                        fs::create_dir_all(dir.join(&sub))?;
                        for (i, smp) in samples.iter().enumerate() {
                            let path = format!("{sub}/{i:03}.png");
                            write_png(&dir.join(&path), &smp.image)?;
                            let rec = SynthRecord {
                                class_name: cls.class_name.clone(),
                                ablation: abl.name().to_string(),
                                replicate: rep,
                                index: i,
                                seed: smp.seed,
                                attributes: smp.attributes,
                                condition_hash: smp.condition_hash.clone(),
                                path,
                            };
                            lines.push_str(&serde_json::to_string(&rec)?);
                            lines.push('\n');
                            count += 1;
                        }
                    }
                }
            }
            fs::write(dir.join("manifest.jsonl"), lines)?;
            Ok(json!({ "images": count }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn synth_records(&self, syn: &StageOut) -> Result<Vec<SynthRecord>> {
        let text = fs::read_to_string(syn.dir.join("manifest.jsonl"))?;
        text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Generated images of one (class, ablation, replicate) cell.
    pub fn synth_images(&self, syn: &StageOut, class: &str, ablation: &str, replicate: u64) -> Result<Vec<Tensor<S>>> {
        self.synth_records(syn)?
            .iter()
            .filter(|r| r.class_name == class && r.ablation == ablation && r.replicate == replicate)
            .map(|r| Ok(read_png(&syn.dir.join(&r.path))?))
            .collect()
    }

    pub fn evaluate(&self) -> Result<StageOut> {
        let c = self.corpus()?;
        let a = self.align()?;
        let syn = self.synthesize()?;
        let conf = json!({ "reference_renders": 64, "seed": self.config.stage_seed("evaluate") });
        let (manifest, dir) = self.store.run_stage("evaluate", conf, upstream(&[&c, &a, &syn]), |dir| {
            let models = self.load_models(&a)?;
            let ext = TrunkExtractor(&models.branches);
            let exemplars = self.load_exemplars(&c)?;
            let size = self.config.corpus.size;
            let mut rows = Vec::new();
            for rc in self.rare()? {
                let ex = exemplars.iter().find(|e| e.class_name == rc.name).ok_or_else(|| anyhow!("no exemplar for {}", rc.name))?;
                let refs = entity_renders::<S>(&rc.attributes, 64, size, self.config.stage_seed("evaluate"), &format!("eval/{}", rc.name))?;
                let ref_set = feature_set("reference", &refs, &ext)?;
                for abl in &self.config.synthesize.ablations {
                    let abl = abl.parse::<Ablation>()?.name().to_string();
                    for &rep in &self.config.synthesize.seeds {
                        let imgs = self.synth_images(&syn, &rc.name, &abl, rep)?;
                        ensure!(imgs.len() >= 2, "synthesized set {}/{abl}/r{rep} has fewer than two images", rc.name);
                        rows.push(SetMetrics {
                            class_name: rc.name.clone(),
                            ablation: abl.clone(),
                            replicate: rep,
                            identity_recovery: identity_recovery(&imgs, &rc.attributes),
                            diversity: perceptual_diversity(&imgs, &ext)?,
                            consistency: image_consistency(&imgs, std::slice::from_ref(&ex.image), &ext)?,
                            fid: fid(&feature_set("generated", &imgs, &ext)?, &ref_set)?.value,
                        });
                    }
                }
            }
            let mut csv = String::from("class,ablation,replicate,identity_recovery,diversity,consistency,fid\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{:.4},{:.6},{:.6},{:.4}\n",
                    r.class_name, r.ablation, r.replicate, r.identity_recovery, r.diversity, r.consistency, r.fid
                ));
            }
            fs::write(dir.join("metrics.csv"), csv)?;
            fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&rows)?)?;
            Ok(json!({ "sets": rows.len() }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn set_metrics(&self, ev: &StageOut) -> Result<Vec<SetMetrics>> {
        Ok(serde_json::from_slice(&fs::read(ev.dir.join("metrics.json"))?)?)
    }

    pub fn bench(&self) -> Result<StageOut> {
        self.config.validate()?;
        let c = self.corpus()?;
        let syn = self.synthesize()?;
        let b = &self.config.bench;
        let conf = json!({ "bench": b, "seed": self.config.stage_seed("bench") });
        let (manifest, dir) = self.store.run_stage("bench", conf, upstream(&[&c, &syn]), |dir| {
            let corpus = self.load_corpus(&c)?;
            let exemplars = self.load_exemplars(&c)?;
            let rare = self.rare()?;
            let data = bench_data(&corpus, &rare, &exemplars, &b.data)?;
            let seeds: Vec<u64> = b.seeds.iter().map(|&s| derive_seed(self.config.stage_seed("bench"), "classifier", s)).collect();
            let mut summary = serde_json::Map::new();
            for strat in &b.strategies {
                let extra = match strat.as_str() {
                    "real" => LabelledSet::new(),
                    "traditional" => traditional_set(&data, b.data.traditional_per_entity, b.data.seed),
                    other => {
                        let abl = other.parse::<Ablation>()?.name().to_string();
                        let mut sets = Vec::new();
                        for rc in &rare {
                            sets.push((rc.name.clone(), self.synth_images(&syn, &rc.name, &abl, b.synth_seed)?));
                        }
                        if sets.iter().any(|s| s.1.is_empty()) {
                            bail!(
                                "no synthetic images for strategy {strat}; run `rarelab synthesize` with ablation {abl} and replicate {} first",
                                b.synth_seed
                            );
                        }
                        let samples: Vec<(String, Vec<rarelab::oneshot::SynthSample<S>>)> = sets
                            .into_iter()
                            .map(|(n, ims)| {
                                let s = ims
                                    .into_iter()
                                    .map(|image| rarelab::oneshot::SynthSample { image, seed: 0, attributes: None, condition_hash: String::new() })
                                    .collect();
                                (n, s)
                            })
                            .collect();
                        synthetic_set(&data.entities, &samples)?
                    }
                };
                let report = run_strategy(strat, &data.entities, &data.real_train, &extra, &data.test, &b.classifier, &seeds, &self.config.fingerprint())?;
                fs::write(dir.join(format!("{strat}.json")), report.to_json())?;
                fs::write(dir.join(format!("{strat}.csv")), report.to_csv())?;
                summary.insert(strat.clone(), json!({ "macro_pr_auc": report.macro_mean.pr_auc, "macro_roc_auc": report.macro_mean.roc_auc }));
            }
            Ok(serde_json::Value::Object(summary))
        })?;
        Ok(StageOut { manifest, dir })
    }

    pub fn bench_report(&self, bench: &StageOut, strategy: &str) -> Result<BenchReport> {
        Ok(serde_json::from_slice(&fs::read(bench.dir.join(format!("{strategy}.json")))?)?)
    }

    /// Reader statistics from the built-in table or a CSV file.
    pub fn stats(&self, records: Option<&Path>) -> Result<StageOut> {
        let (source, recs) = match records {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                (rarelab_hash(&text), read_records(&text)?)
            }
            None => ("builtin-table1".to_string(), table1_records()),
        };
        let (manifest, dir) = self.store.run_stage("stats", json!({ "records": source }), BTreeMap::new(), |dir| {
            let report = reader_report(&recs)?;
            fs::write(dir.join("reader_report.csv"), report.to_csv())?;
            fs::write(dir.join("reader_report.txt"), report.to_text())?;
            Ok(json!({ "entities": report.entities }))
        })?;
        Ok(StageOut { manifest, dir })
    }

    /// Reader statistics plus the per-replicate diversity ordering of the
    /// full model against the prototype-only ablation.
    pub fn reproduce(&self) -> Result<(StageOut, StageOut, String)> {
        let st = self.stats(None)?;
        let ev = self.evaluate()?;
        let rows = self.set_metrics(&ev)?;
        let mut text = fs::read_to_string(st.dir.join("reader_report.txt"))?;
        text.push_str("\nclass  replicate  diversity(full)  diversity(pse_only)  ordering\n");
        for rc in self.rare()? {
            for &rep in &self.config.synthesize.seeds {
                let get = |abl: &str| rows.iter().find(|r| r.class_name == rc.name && r.ablation == abl && r.replicate == rep);
                if let (Some(f), Some(p)) = (get("full"), get("pse_only")) {
                    let ok = f.diversity > p.diversity;
                    text.push_str(&format!(
                        "{:<6} {:>9}  {:>15.5}  {:>19.5}  {}\n",
                        rc.name,
                        rep,
                        f.diversity,
                        p.diversity,
                        if ok { "pass" } else { "fail" }
                    ));
                }
            }
        }
        Ok((st, ev, text))
    }
}

fn rarelab_hash(text: &str) -> String {
    crate::config::sha256_hex(text.as_bytes())
}

/// Per-attribute nearest-token decoding accuracy on fresh renders of
/// uniformly drawn combinations, rare ones included.
pub fn heldout_decoding(
    branches: &AttributeBranches<S>,
    text: &TextEncoder<S>,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    use rand::Rng;
    let ranges = NuisanceRanges::default();
    let mut truth = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, "heldout", i as u64);
        let a = AttributeSet::from_indices([0; 4].map(|_| r.random_range(0..VOCAB_SIZE)));
        let spec = SceneSpec { attributes: a, nuisance: ranges.sample(&mut r), seed: r.random() };
        images.push(render_scene::<S>(&spec, size)?);
        truth.push(a);
    }
    let dec = NearestDecoder::new(text);
    let mut hits = [0usize; 4];
    for (chunk, t) in images.chunks(128).zip(truth.chunks(128)) {
        let got = dec.decode_images(branches, &Tensor::stack(chunk))?;
        for (g, a) in got.iter().zip(t) {
            for k in AttributeKind::ALL {
                hits[k.index()] += usize::from(g.get(k) == a.get(k));
            }
        }
    }
    Ok(AttributeKind::ALL.iter().map(|k| (k.name().to_string(), hits[k.index()] as f64 / n.max(1) as f64)).collect())
}
