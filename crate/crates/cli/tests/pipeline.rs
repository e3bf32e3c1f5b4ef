//! End-to-end smoke run of every stage on a miniature configuration.

use std::fs;

use rarelab_cli::{Pipeline, RunConfig, Store};

const TINY: &str = r#"
seed = 11

[corpus]
n = 48
size = 32

[models.denoiser]
image_size = 32
channels = 3
patch = 2
widths = [8, 8, 8]
time_dim = 8
embed_dim = 16
cond_dim = 16
attn_dim = 8
init_seed = 0

[models.text]
dim = 16
hidden = 16
max_len = 16
init_seed = 1

[models.branches]
image_size = 32
channels = 3
widths = [4, 4, 8, 8]
hidden = 16
dim = 16
separate_trunks = false
init_seed = 2

[pretrain]
steps = 2
batch = 4

[align]
steps = 2
batch = 4
heldout = 8

[invert]
tokens = 2
steps = 2
batch = 2

[synthesize]
n = 3
sampler_steps = 2
batch = 3
seeds = [0, 1]

[bench]
seeds = [0, 1]
synth_seed = 1

[bench.classifier]
widths = [4, 4, 4]
steps = 2
batch = 8
lr = 0.001

[bench.data]
background_train = 8
positives_per_entity = 3
background_test = 6
traditional_per_entity = 2
seed = 7
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

#[test]
fn all_stages_complete_and_rerun_reuses_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), Store::new(tmp.path())).unwrap();

    let bench = p.bench().unwrap();
    for s in ["real", "traditional", "pse_only", "full"] {
        let r = p.bench_report(&bench, s).unwrap();
        assert_eq!(r.strategy, s);
        assert_eq!(r.per_seed.len(), 2);
        r.check_consistency().unwrap();
    }
    let ev = p.evaluate().unwrap();
    let rows = p.set_metrics(&ev).unwrap();
    // 4 classes x 2 ablations x 2 replicates
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.diversity.is_finite() && r.fid.is_finite()));

    let syn = p.synthesize().unwrap();
    let recs = p.synth_records(&syn).unwrap();
    assert_eq!(recs.len(), 4 * 2 * 2 * 3);
    assert!(recs.iter().filter(|r| r.ablation == "full").all(|r| r.attributes.is_some()));

    let index = fs::read_to_string(tmp.path().join("index.jsonl")).unwrap();
    let stages = index.lines().count();
    assert_eq!(stages, 7, "{index}");

    // a second pipeline over the same store finds everything in place
    let again = Pipeline::new(tiny(), Store::new(tmp.path())).unwrap();
    let b2 = again.bench().unwrap();
    assert_eq!(b2.fingerprint(), bench.fingerprint());
    assert_eq!(fs::read_to_string(tmp.path().join("index.jsonl")).unwrap().lines().count(), stages);
}

#[test]
fn reruns_in_a_fresh_store_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = Pipeline::new(tiny(), Store::new(a.path())).unwrap();
    let pb = Pipeline::new(tiny(), Store::new(b.path())).unwrap();
    let sa = pa.invert().unwrap();
    let sb = pb.invert().unwrap();
    assert_eq!(sa.fingerprint(), sb.fingerprint());
    assert_eq!(sa.manifest.files, sb.manifest.files);
    let aa = pa.align().unwrap();
    let ab = pb.align().unwrap();
    assert_eq!(aa.manifest.files, ab.manifest.files);
}

#[test]
fn single_class_inversion() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(), Store::new(tmp.path())).unwrap();
    p.classes = vec!["JPS".into()];
    let inv = p.invert().unwrap();
    assert!(inv.dir.join("prototype_JPS.bin").exists());
    assert!(!inv.dir.join("prototype_CFT.bin").exists());
    p.classes = vec!["nope".into()];
    assert!(p.invert().is_err());
}

#[test]
fn bench_refuses_missing_synthetic_images() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.synthesize.n = 0;
    let p = Pipeline::new(cfg, Store::new(tmp.path())).unwrap();
    let err = format!("{:#}", p.bench().unwrap_err());
    assert!(err.contains("rarelab synthesize"), "{err}");
}

#[test]
fn stats_stage_reports_the_builtin_table() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), Store::new(tmp.path())).unwrap();
    let st = p.stats(None).unwrap();
    let text = fs::read_to_string(st.dir.join("reader_report.txt")).unwrap();
    for e in ["JPS", "CFT", "PJS", "FAP"] {
        assert!(text.contains(e), "{text}");
    }
}
