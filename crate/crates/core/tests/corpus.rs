use proptest::prelude::*;
use rarelab::attributes::{AttributeKind, AttributeSet, VocabManifest, COMBINATIONS};
use rarelab::corpus::*;
use rarelab::grammar::format_report;
use rarelab::nn::Tensor;

fn spec(attrs: AttributeSet) -> SceneSpec {
    SceneSpec { attributes: attrs, nuisance: Nuisance::default(), seed: 5 }
}

fn mean(t: &Tensor<f64>) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

#[test]
fn rendering_is_deterministic() {
    let s = spec(AttributeSet::from_combination_id(77));
    let a = render_scene::<f64>(&s, 32).unwrap();
    let b = render_scene::<f64>(&s, 32).unwrap();
    assert_eq!(a.shape(), &[32, 32, 3]);
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn higher_gain_is_brighter() {
    let mut s = spec(AttributeSet::from_combination_id(3));
    let dim = render_scene::<f64>(&s, 32).unwrap();
    s.nuisance.gain = 1.5;
    let bright = render_scene::<f64>(&s, 32).unwrap();
    assert!(mean(&bright) > mean(&dim));
}

#[test]
fn out_of_range_nuisance_is_rejected() {
    let base = spec(AttributeSet::from_combination_id(0));
    for bad in [
        Nuisance { scale: 0.05, ..base.nuisance },
        Nuisance { scale: 0.55, ..base.nuisance },
        Nuisance { gain: 1.6, ..base.nuisance },
        Nuisance { gain: 0.4, ..base.nuisance },
        Nuisance { vignette: -0.1, ..base.nuisance },
        Nuisance { offset: [f64::NAN, 0.0], ..base.nuisance },
    ] {
        assert!(render_scene::<f64>(&SceneSpec { nuisance: bad, ..base }, 32).is_err(), "{bad:?}");
    }
    assert!(render_scene::<f64>(&base, 16).is_err());
}

#[test]
fn probe_reads_a_thousand_renders_exactly() {
    let v = VocabManifest::default();
    let cfg = CorpusConfig { n: 1000, seed: 42, ..Default::default() };
    let pairs = make_corpus::<f64>(&cfg, &v, &[]).unwrap();
    let wrong: Vec<_> = pairs.iter().filter(|p| probe(&p.image).unwrap() != p.attributes).map(|p| p.spec).collect();
    assert!(wrong.is_empty(), "{} misread, first {:?}", wrong.len(), wrong.first());
}

#[test]
fn probe_reads_every_combination() {
    for a in AttributeSet::all() {
        let img = render_scene::<f64>(&spec(a), 32).unwrap();
        assert_eq!(probe(&img).unwrap(), a);
    }
}

#[test]
fn probe_on_empty_frame_reports_no_lesion() {
    let flat = Tensor::<f64>::full(&[32, 32, 3], -0.4);
    assert!(probe(&flat).is_err());
    assert!(probe(&Tensor::<f64>::zeros(&[32, 32])).is_err());
}

#[test]
fn corpus_size_boundaries() {
    let v = VocabManifest::default();
    assert!(make_corpus::<f32>(&CorpusConfig { n: 0, ..Default::default() }, &v, &[]).is_err());
    let one = make_corpus::<f32>(&CorpusConfig { n: 1, ..Default::default() }, &v, &[]).unwrap();
    assert_eq!(one.len(), 1);
    let all: Vec<AttributeSet> = AttributeSet::all().collect();
    assert!(make_corpus::<f32>(&CorpusConfig { n: 1, ..Default::default() }, &v, &all).is_err());
}

#[test]
fn held_out_combination_never_sampled() {
    let held = AttributeSet::from_combination_id(123);
    let allowed = common_combinations(&[held]);
    assert_eq!(allowed.len(), COMBINATIONS - 1);
    let cfg = CorpusConfig { n: 10_000, ..Default::default() };
    assert!((0..cfg.n).all(|i| corpus_scene(&cfg, &allowed, i).attributes != held));
    let v = VocabManifest::default();
    let pairs = make_corpus::<f32>(&CorpusConfig { n: 300, ..Default::default() }, &v, &v.holdouts()).unwrap();
    assert!(pairs.iter().all(|p| !v.holdouts().contains(&p.attributes)));
}

#[test]
fn marginals_are_near_uniform() {
    let v = VocabManifest::default();
    let cfg = CorpusConfig { n: 4096, ..Default::default() };
    let allowed = common_combinations(&v.holdouts());
    let mut counts = [[0usize; 4]; 4];
    for i in 0..cfg.n {
        let a = corpus_scene(&cfg, &allowed, i).attributes;
        for k in AttributeKind::ALL {
            counts[k.index()][a.get(k)] += 1;
        }
    }
    for row in counts {
        for c in row {
            let f = c as f64 / cfg.n as f64;
            assert!((f - 0.25).abs() <= 0.03, "{counts:?}");
        }
    }
}

#[test]
fn reports_follow_the_template_and_corpus_is_reproducible() {
    let v = VocabManifest::default();
    let cfg = CorpusConfig { n: 40, seed: 9, ..Default::default() };
    let a = make_corpus::<f32>(&cfg, &v, &v.holdouts()).unwrap();
    let b = make_corpus::<f32>(&cfg, &v, &v.holdouts()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report, format_report(&x.attributes));
        assert_eq!(x.image.data(), y.image.data());
        assert_eq!(x.spec, y.spec);
    }
    let c = make_corpus::<f32>(&CorpusConfig { seed: 10, ..cfg }, &v, &v.holdouts()).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.image.data() != y.image.data()));
}

#[test]
fn exemplars_cover_the_four_entities() {
    let v = VocabManifest::default();
    let ex = rare_exemplars::<f64>(&v, 32, 1).unwrap();
    let names: Vec<&str> = ex.iter().map(|e| e.class_name.as_str()).collect();
    assert_eq!(names, ["JPS", "CFT", "FAP", "PJS"]);
    let again = rare_exemplars::<f64>(&v, 32, 1).unwrap();
    for (e, f) in ex.iter().zip(&again) {
        assert_eq!(e.image.data(), f.image.data());
        assert_eq!(probe(&e.image).unwrap(), e.hidden_attributes);
        assert!(v.holdouts().contains(&e.hidden_attributes));
    }
}

#[test]
fn exemplar_of_common_combination_is_rejected() {
    let v = VocabManifest::default();
    let common = common_combinations(&v.holdouts())[0];
    assert!(make_rare_exemplar::<f64>("X", common, &v, &NuisanceRanges::default(), 32, 0).is_err());
}

#[test]
fn corpus_round_trips_through_disk() {
    let v = VocabManifest::default();
    let pairs = make_corpus::<f32>(&CorpusConfig { n: 12, ..Default::default() }, &v, &v.holdouts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(dir.path(), &pairs).unwrap();
    assert!(dir.path().join(SIDECAR).exists());
    let back = load_corpus::<f32>(dir.path()).unwrap();
    assert_eq!(back.len(), pairs.len());
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.attributes, b.attributes);
        assert_eq!(a.report, b.report);
        assert_eq!(a.spec, b.spec);
        // 8-bit quantization only
        let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0 + 1e-6, "{err}");
        assert_eq!(probe(&b.image).unwrap(), a.attributes);
    }
}

#[test]
fn larger_frames_render_and_probe() {
    let a = AttributeSet::from_combination_id(200);
    let img = render_scene::<f64>(&spec(a), 64).unwrap();
    assert_eq!(img.shape(), &[64, 64, 3]);
    assert_eq!(probe(&img).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probe_recovers_any_in_range_scene(
        id in 0..COMBINATIONS,
        ox in -1.0f64..1.0, oy in -1.0f64..1.0,
        scale in 0.42f64..0.48, gain in 0.75f64..1.25, vig in 0.1f64..0.4,
        seed in any::<u64>(),
    ) {
        let a = AttributeSet::from_combination_id(id);
        let s = SceneSpec { attributes: a, nuisance: Nuisance { offset: [ox, oy], scale, gain, vignette: vig }, seed };
        prop_assert_eq!(probe(&render_scene::<f64>(&s, 32).unwrap()).unwrap(), a);
    }
}
