use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarelab::eval::*;
use rarelab::nn::Tensor;

/// Probability that a random positive outranks a random negative, ties 1/2.
fn mann_whitney(s: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = s.iter().filter(|x| x.1).map(|x| x.0).collect();
    let neg: Vec<f64> = s.iter().filter(|x| !x.1).map(|x| x.0).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn random_set(r: &mut ChaCha8Rng) -> ScoredSampleSet {
    let n = r.random_range(2..80);
    let coarse = r.random_bool(0.5);
    let mut v: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let y = r.random_bool(0.4);
            let s: f64 = r.random::<f64>() + if y { 0.3 } else { 0.0 };
            // coarse scores force ties
            (if coarse { (s * 5.0).round() / 5.0 } else { s }, y)
        })
        .collect();
    v[0].1 = true;
    v[1].1 = false;
    ScoredSampleSet::new("e", v)
}

#[test]
fn roc_auc_equals_pairwise_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let s = random_set(&mut r);
        let a = roc_auc(&s).unwrap();
        assert!((a - mann_whitney(&s.samples)).abs() < 1e-9);
        assert!((pauc(&s, 0.0, 1.0).unwrap() - a).abs() < 1e-12);
    }
}

#[test]
fn perfect_classifier_partial_area() {
    let s = ScoredSampleSet::new("e", vec![(3.0, true), (2.0, true), (1.0, false), (0.0, false), (-1.0, false)]);
    assert_eq!(pauc(&s, 0.0, 0.2).unwrap(), 0.2);
    assert_eq!(tpr_at_fpr(&s, 0.2, true).unwrap(), 1.0);
}

#[test]
fn average_precision_by_hand() {
    // ranking: + - + -  => AP = 1/2 * 1 + 1/2 * 2/3
    let s = ScoredSampleSet::new("e", vec![(4.0, true), (3.0, false), (2.0, true), (1.0, false)]);
    assert!((pr_auc(&s).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn interpolated_tpr_uses_the_crossing_segment() {
    // ROC: (0,0) (0,.5) (.5,.5) (.5,1) (1,1); segment from (0,.5) to (.5,.5) is flat
    let s = ScoredSampleSet::new("e", vec![(0.4, true), (0.3, false), (0.2, true), (0.1, false)]);
    assert_eq!(tpr_at_fpr(&s, 0.2, true).unwrap(), 0.5);
    // all-tied: ROC is the diagonal, interpolation gives the cap itself
    let t = ScoredSampleSet::new("e", vec![(1.0, true), (1.0, false)]);
    assert_eq!(tpr_at_fpr(&t, 0.2, false).unwrap(), 0.0);
    assert!((tpr_at_fpr(&t, 0.2, true).unwrap() - 0.2).abs() < 1e-15);
}

#[test]
fn nonfinite_scores_rejected() {
    let s = ScoredSampleSet::new("e", vec![(f64::NAN, true), (0.0, false)]);
    assert!(roc_auc(&s).is_err());
}

proptest! {
    #[test]
    fn curve_metrics_are_bounded_and_monotone_under_rescaling(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut r);
        let a = roc_auc(&s).unwrap();
        let ap = pr_auc(&s).unwrap();
        let p = pauc(&s, 0.0, 0.2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=0.2 + 1e-15).contains(&p));
        // a strictly increasing transform of the scores changes nothing
        let t = ScoredSampleSet::new("e", s.samples.iter().map(|&(v, y)| (3.0 * v.exp() - 1.0, y)).collect());
        prop_assert!((roc_auc(&t).unwrap() - a).abs() < 1e-12);
        prop_assert!((pr_auc(&t).unwrap() - ap).abs() < 1e-12);
        let lo = tpr_at_fpr(&s, 0.1, false).unwrap();
        let hi = tpr_at_fpr(&s, 0.3, false).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(tpr_at_fpr(&s, 0.2, true).unwrap() >= tpr_at_fpr(&s, 0.2, false).unwrap());
    }

    #[test]
    fn pauc_is_additive(seed in 0u64..10_000, cut in 0.05f64..0.95) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut r);
        let whole = pauc(&s, 0.0, 1.0).unwrap();
        let parts = pauc(&s, 0.0, cut).unwrap() + pauc(&s, cut, 1.0).unwrap();
        prop_assert!((whole - parts).abs() < 1e-12);
    }
}

/// Points `mu +- s_j e_j`: sample mean `mu`, sample covariance
/// `diag(2 s_j^2 / (2F - 1))`.
fn axis_cloud(mu: &[f64], s: &[f64]) -> FeatureVectorSet {
    let f = mu.len();
    let mut rows = Vec::new();
    for j in 0..f {
        for sign in [-1.0, 1.0] {
            let mut r = mu.to_vec();
            r[j] += sign * s[j];
            rows.push(r);
        }
    }
    FeatureVectorSet::new("cloud", rows).unwrap()
}

#[test]
fn fid_of_commuting_gaussians() {
    let (mu_a, s_a): ([f64; 3], [f64; 3]) = ([0.0, 1.0, -2.0], [1.0, 2.0, 0.5]);
    let (mu_b, s_b) = ([1.0, 1.0, 0.0], [3.0, 0.5, 0.5]);
    let k: f64 = 2.0 / 5.0;
    let mut want = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    for j in 0..3 {
        let (va, vb) = (k * s_a[j] * s_a[j], k * s_b[j] * s_b[j]);
        want += va + vb - 2.0 * (va * vb).sqrt();
    }
    let got = fid(&axis_cloud(&mu_a, &s_a), &axis_cloud(&mu_b, &s_b)).unwrap();
    assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
    assert!(!got.clamped);
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| r.random::<f64>()).collect()).collect();
    let a = FeatureVectorSet::new("a", rows).unwrap();
    assert!(fid(&a, &a).unwrap().value.abs() < 1e-8);
}

#[test]
fn fid_translation_adds_squared_shift() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| r.random::<f64>()).collect()).collect();
    let shift = [0.5, -1.0, 0.0, 2.0];
    let moved = rows.iter().map(|x| x.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
    let a = FeatureVectorSet::new("a", rows).unwrap();
    let b = FeatureVectorSet::new("b", moved).unwrap();
    assert!((fid(&a, &b).unwrap().value - 5.25).abs() < 1e-8);
}

fn cov2(rows: &[Vec<f64>]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = rows.len() as f64;
    let m = [rows.iter().map(|r| r[0]).sum::<f64>() / n, rows.iter().map(|r| r[1]).sum::<f64>() / n];
    let mut c = [[0.0; 2]; 2];
    for r in rows {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (r[i] - m[i]) * (r[j] - m[j]) / (n - 1.0);
            }
        }
    }
    (m, c)
}

proptest! {
    /// In two dimensions `Tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))`, and
    /// `S_a S_b` has the same trace and determinant as the symmetric form.
    #[test]
    fn fid_matches_two_dimensional_closed_form(seed in 0u64..5_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |mix: f64| -> Vec<Vec<f64>> {
            (0..12).map(|_| {
                let (u, v): (f64, f64) = (r.random::<f64>() - 0.5, r.random::<f64>() - 0.5);
                vec![u + mix * v, 2.0 * v]
            }).collect()
        };
        let (ra, rb) = (draw(0.3), draw(-0.8));
        let (ma, a) = cov2(&ra);
        let (mb, b) = cov2(&rb);
        let p = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        let tr = p[0][0] + p[1][1];
        let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * (b[0][0] * b[1][1] - b[0][1] * b[1][0]);
        let root = (tr + 2.0 * det.max(0.0).sqrt()).sqrt();
        let want = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + a[0][0] + a[1][1] + b[0][0] + b[1][1] - 2.0 * root;
        let got = fid(&FeatureVectorSet::new("a", ra).unwrap(), &FeatureVectorSet::new("b", rb).unwrap()).unwrap();
        prop_assert!((got.value - want.max(0.0)).abs() < 1e-6, "{} vs {}", got.value, want);
    }
}

#[test]
fn fid_rejects_mismatched_inputs() {
    let a = FeatureVectorSet::new("a", vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let b = FeatureVectorSet::new("b", vec![vec![0.0], vec![1.0]]).unwrap();
    assert!(fid(&a, &b).is_err());
    assert!(FeatureVectorSet::new("c", vec![vec![0.0], vec![1.0, 2.0]]).is_err());
    let one = FeatureVectorSet::new("d", vec![vec![0.0, 1.0]]).unwrap();
    assert!(fid(&a, &one).is_err());
}

fn img(v: [f32; 3]) -> Tensor<f32> {
    Tensor::new(&[2, 2, 3], (0..4).flat_map(|_| v).collect())
}

#[test]
fn diversity_by_hand() {
    // unit channel vectors e0 and e1 differ by squared distance 2 at every position
    let a = img([1.0, 0.0, 0.0]);
    let b = img([0.0, 2.0, 0.0]);
    let d = perceptual_diversity(&[a.clone(), b.clone()], &IdentityExtractor).unwrap();
    assert!((d - 2.0).abs() < 1e-9);
    let same = perceptual_diversity(&[a.clone(), a.clone(), a.clone()], &IdentityExtractor).unwrap();
    assert!(same.abs() < 1e-12);
    // three images, one pair identical: mean of {0, 2, 2}
    let d3 = perceptual_diversity(&[a.clone(), a, b], &IdentityExtractor).unwrap();
    assert!((d3 - 4.0 / 3.0).abs() < 1e-9);
}

#[test]
fn consistency_by_hand() {
    let gen = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let refs = vec![vec![1.0, 1.0], vec![2.0, 0.0]];
    // best cosines: 1 and 1/sqrt 2
    let c = consistency_from_embeddings(&gen, &refs).unwrap();
    assert!((c - (1.0 + 0.5f64.sqrt()) / 2.0).abs() < 1e-12);
    assert!(consistency_from_embeddings(&gen, &[]).is_err());
}

#[test]
fn diagonal_classifier_partial_area() {
    // every score tied: the ROC is the diagonal
    let s = ScoredSampleSet::new("e", vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)]);
    assert!((pauc(&s, 0.0, 0.2).unwrap() - 0.02).abs() < 1e-15);
    assert!((pauc(&s, 0.1, 0.3).unwrap() - (0.09 - 0.01) / 2.0).abs() < 1e-15);
}

/// Enumerate every threshold `score >= c` directly.
fn brute_tpr_at(s: &[(f64, bool)], cap: f64) -> f64 {
    let pos = s.iter().filter(|x| x.1).count() as f64;
    let neg = s.len() as f64 - pos;
    let mut best = 0.0f64;
    for &(c, _) in s {
        let tp = s.iter().filter(|x| x.1 && x.0 >= c).count() as f64;
        let fp = s.iter().filter(|x| !x.1 && x.0 >= c).count() as f64;
        if fp / neg <= cap {
            best = best.max(tp / pos);
        }
    }
    best
}

#[test]
fn tpr_at_fpr_matches_threshold_enumeration() {
    let anti = vec![(0.1, true), (0.2, true), (0.3, false), (0.4, false), (0.5, false), (0.6, false), (0.7, false)];
    let s = ScoredSampleSet::new("e", anti.clone());
    assert_eq!(tpr_at_fpr(&s, 0.0, false).unwrap(), 0.0);
    assert_eq!(tpr_at_fpr(&s, 0.2, false).unwrap(), brute_tpr_at(&anti, 0.2));
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let s = random_set(&mut r);
        for cap in [0.0, 0.1, 0.2, 0.5] {
            assert_eq!(tpr_at_fpr(&s, cap, false).unwrap(), brute_tpr_at(&s.samples, cap));
        }
    }
}

#[test]
fn pauc_matches_riemann_sum() {
    let s = ScoredSampleSet::new("e", vec![(0.1, false), (0.2, true), (0.3, false), (0.4, true), (0.35, false)]);
    let pts = roc_points(&s).unwrap();
    let at = |x: f64| {
        let w = pts.windows(2).find(|w| w[0].0 <= x && x <= w[1].0 && w[1].0 > w[0].0).unwrap();
        w[0].1 + (w[1].1 - w[0].1) * (x - w[0].0) / (w[1].0 - w[0].0)
    };
    let n = 200_000;
    let (lo, hi) = (0.05, 0.55);
    let h = (hi - lo) / n as f64;
    let riemann: f64 = (0..n).map(|k| at(lo + (k as f64 + 0.5) * h) * h).sum();
    assert!((pauc(&s, lo, hi).unwrap() - riemann).abs() < 1e-9);
}

#[test]
fn fid_of_one_dimensional_unit_gaussians() {
    // {-1, 1} has mean 0 and sample variance 2; shift by one
    let a = FeatureVectorSet::new("a", vec![vec![-1.0], vec![1.0]]).unwrap();
    let b = FeatureVectorSet::new("b", vec![vec![0.0], vec![2.0]]).unwrap();
    let f = fid(&a, &b).unwrap();
    assert!((f.value - 1.0).abs() < 1e-12);
    assert!((fid(&b, &a).unwrap().value - 1.0).abs() < 1e-12);
}

#[test]
fn fid_ignores_row_order() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
    let other: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| 2.0 * r.random::<f64>()).collect()).collect();
    let b = FeatureVectorSet::new("b", other).unwrap();
    let before = fid(&FeatureVectorSet::new("a", rows.clone()).unwrap(), &b).unwrap().value;
    rows.reverse();
    let after = fid(&FeatureVectorSet::new("a", rows).unwrap(), &b).unwrap().value;
    assert!((before - after).abs() < 1e-10);
}

#[test]
fn diversity_ignores_order_and_rejects_singletons() {
    let ims = [img([1.0, 0.0, 0.0]), img([0.3, 0.5, 0.1]), img([0.0, 0.0, 1.0])];
    let a = perceptual_diversity(&ims, &IdentityExtractor).unwrap();
    let b = perceptual_diversity(&[ims[2].clone(), ims[0].clone(), ims[1].clone()], &IdentityExtractor).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(perceptual_diversity(&ims[..1], &IdentityExtractor).is_err());
}

#[test]
fn consistency_limits() {
    let a = img([1.0, 0.0, 0.0]);
    let c = image_consistency(&[a.clone()], &[a], &IdentityExtractor).unwrap();
    assert!((c - 1.0).abs() < 1e-12);
    let o = consistency_from_embeddings(&[vec![1.0, 0.0]], &[vec![0.0, 3.0]]).unwrap();
    assert_eq!(o, 0.0);
}
