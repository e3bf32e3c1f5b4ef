use std::collections::BTreeMap;
use std::fs;

use rarelab_cli::config::{canonical_json, json_diff, RunConfig};
use rarelab_cli::store::{stage_fingerprint, Store};
use serde_json::json;

#[test]
fn fingerprint_ignores_key_order() {
    let a = json!({ "b": 1, "a": { "y": [1, 2], "x": "s" } });
    let b: serde_json::Value = serde_json::from_str(r#"{"a":{"x":"s","y":[1,2]},"b":1}"#).unwrap();
    assert_eq!(canonical_json(&a), canonical_json(&b));
    let up = BTreeMap::new();
    assert_eq!(stage_fingerprint("s", &a, &up), stage_fingerprint("s", &b, &up));
    assert_ne!(stage_fingerprint("s", &a, &up), stage_fingerprint("t", &a, &up));
}

#[test]
fn toml_section_order_does_not_change_the_fingerprint() {
    let one = "seed = 3\n[corpus]\nn = 100\nsize = 32\n[pretrain]\nsteps = 10\n";
    let two = "seed = 3\n[pretrain]\nsteps = 10\n[corpus]\nsize = 32\nn = 100\n";
    let a = RunConfig::from_toml(one).unwrap();
    let b = RunConfig::from_toml(two).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), RunConfig::default().fingerprint());
}

#[test]
fn config_round_trips_through_toml() {
    let c = RunConfig::default();
    let back = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(c, back);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(RunConfig::from_toml("[corpus]\nnn = 3\n").is_err());
}

#[test]
fn stage_seeds_differ_per_stage() {
    let c = RunConfig::default();
    assert_ne!(c.stage_seed("pretrain"), c.stage_seed("align"));
    let d = RunConfig { seed: 1, ..RunConfig::default() };
    assert_ne!(c.stage_seed("pretrain"), d.stage_seed("pretrain"));
}

#[test]
fn bench_strategy_must_have_matching_ablation() {
    let mut c = RunConfig::default();
    c.synthesize.ablations = vec!["full".into()];
    let err = c.validate().unwrap_err().to_string();
    assert!(err.contains("pse_only"), "{err}");
    c.bench.strategies = vec!["real".into(), "full".into()];
    c.validate().unwrap();
}

#[test]
fn json_diff_names_the_changed_fields() {
    let a = json!({ "x": 1, "y": { "z": 2, "w": 3 } });
    let b = json!({ "x": 1, "y": { "z": 5 }, "v": true });
    let d = json_diff(&a, &b);
    assert_eq!(d.len(), 3, "{d:?}");
    assert!(d.iter().any(|l| l.starts_with("y.z: 2 -> 5")));
    assert!(d.iter().any(|l| l.starts_with("y.w")));
    assert!(d.iter().any(|l| l.starts_with("v")));
    assert!(json_diff(&a, &a).is_empty());
}

#[test]
fn stage_runs_once_and_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let cfg = json!({ "k": 1 });
    let mut calls = 0;
    let (m1, d1) = store
        .run_stage("demo", cfg.clone(), BTreeMap::new(), |dir| {
            calls += 1;
            fs::write(dir.join("out.txt"), "hello")?;
            Ok(json!({ "score": 0.5 }))
        })
        .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(fs::read_to_string(d1.join("out.txt")).unwrap(), "hello");
    assert!(m1.files.contains_key("out.txt"));
    let (m2, d2) = store
        .run_stage("demo", cfg, BTreeMap::new(), |_| -> anyhow::Result<_> { panic!("must not rerun") })
        .unwrap();
    assert_eq!(d1, d2);
    assert_eq!(m1.fingerprint, m2.fingerprint);
    let index = fs::read_to_string(tmp.path().join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 1);
    assert!(d1.starts_with(tmp.path().join("runs").join(&m1.fingerprint)));
}

#[test]
fn modified_artifacts_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let (_, dir) = store
        .run_stage("demo", json!({}), BTreeMap::new(), |dir| {
            fs::write(dir.join("a.bin"), [1u8, 2, 3])?;
            Ok(json!(null))
        })
        .unwrap();
    fs::write(dir.join("a.bin"), [9u8]).unwrap();
    let err = store.run_stage("demo", json!({}), BTreeMap::new(), |_| Ok(json!(null))).unwrap_err();
    assert!(err.to_string().contains("modified"), "{err}");
}

#[test]
fn failed_stage_leaves_no_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let r = store.run_stage("demo", json!({}), BTreeMap::new(), |dir| {
        fs::write(dir.join("half.txt"), "x")?;
        anyhow::bail!("boom")
    });
    assert!(r.is_err());
    let fp = stage_fingerprint("demo", &json!({}), &BTreeMap::new());
    assert!(store.load("demo", &fp).unwrap().is_none());
    // the lock was released, so a retry succeeds
    store.run_stage("demo", json!({}), BTreeMap::new(), |_| Ok(json!(1))).unwrap();
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let fp = stage_fingerprint("demo", &json!({}), &BTreeMap::new());
    let run = tmp.path().join("runs").join(&fp);
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "1").unwrap();
    let err = store.run_stage("demo", json!({}), BTreeMap::new(), |_| Ok(json!(1))).unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
}

#[test]
fn upstream_fingerprints_change_downstream_ones() {
    let c = json!({ "a": 1 });
    let mut up = BTreeMap::new();
    up.insert("corpus".to_string(), "aaa".to_string());
    let f1 = stage_fingerprint("pretrain", &c, &up);
    up.insert("corpus".to_string(), "bbb".to_string());
    assert_ne!(f1, stage_fingerprint("pretrain", &c, &up));
}
