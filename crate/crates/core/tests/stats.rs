use proptest::prelude::*;
use rarelab::stats::*;

fn cell(r: &ReaderReport, e: &str, m: Metric) -> SummaryCell {
    *r.cell(e, m).unwrap()
}

#[test]
fn reader_table_p_values() {
    let r = reader_report(&table1_records()).unwrap();
    let p = |e, m| cell(&r, e, m).test.p();
    let close = |got: Option<f64>, want: f64, tol: f64| {
        let got = got.expect("p available");
        assert!((got - want).abs() <= tol, "{got} vs {want}");
    };
    close(p("JPS", Metric::Precision), 0.0052, 0.0005);
    close(p("JPS", Metric::Recall), 0.0004, 0.00005);
    close(p("JPS", Metric::F1), 0.0026, 0.0005);
    close(p("CFT", Metric::Precision), 0.0004, 0.00005);
    close(p("CFT", Metric::Recall), 0.0001, 0.00005);
    close(p("CFT", Metric::F1), 0.0002, 0.00005);
    for m in Metric::ALL {
        close(p("PJS", m), 0.3739, 0.001);
        assert_eq!(cell(&r, "FAP", m).test, TTest::NotAvailable);
    }
}

#[test]
fn reader_table_means_and_deltas() {
    let r = reader_report(&table1_records()).unwrap();
    // (entity, metric, pre, post, delta) as printed
    let rows = [
        ("JPS", Metric::Precision, 3.3, 48.0, 44.7),
        ("JPS", Metric::Recall, 5.0, 70.0, 65.0),
        ("JPS", Metric::F1, 4.0, 55.9, 51.9),
        ("CFT", Metric::Precision, 13.3, 96.0, 82.7),
        ("CFT", Metric::Recall, 10.0, 100.0, 90.0),
        ("CFT", Metric::F1, 11.4, 97.8, 86.4),
        ("FAP", Metric::F1, 100.0, 100.0, 0.0),
        ("PJS", Metric::Precision, 95.0, 100.0, 5.0),
    ];
    for (e, m, pre, post, d) in rows {
        let c = cell(&r, e, m);
        assert!((c.mean_pre - pre).abs() <= 0.1, "{e} {m:?} pre {}", c.mean_pre);
        assert!((c.mean_post - post).abs() <= 0.1, "{e} {m:?} post {}", c.mean_post);
        assert!((c.delta - d).abs() <= 0.1, "{e} {m:?} delta {}", c.delta);
    }
}

#[test]
fn report_renders_na_for_constant_differences() {
    let r = reader_report(&table1_records()).unwrap();
    let csv = r.to_csv();
    assert!(csv.lines().any(|l| l.starts_with("FAP,precision") && l.ends_with(",NA")));
    assert!(r.to_text().contains("NA"));
}

#[test]
fn missing_phase_is_rejected() {
    let mut recs = table1_records();
    recs.retain(|r| !(r.reader == 3 && r.entity == "CFT" && r.phase == Phase::Post));
    assert!(reader_report(&recs).is_err());
}

#[test]
fn t_tail_matches_closed_forms() {
    for &t in &[0.1, 0.7, 1.0, 2.5, 9.0, 40.0] {
        let df1 = 1.0 - 2.0 / std::f64::consts::PI * f64::atan(t);
        let df2 = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((student_t_two_sided(t, 1.0) - df1).abs() < 1e-12, "df=1 t={t}");
        assert!((student_t_two_sided(t, 2.0) - df2).abs() < 1e-12, "df=2 t={t}");
    }
}

#[test]
fn ln_gamma_matches_factorials() {
    let mut f = 1.0f64;
    for n in 1..20 {
        assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-10, "n={n}");
        f *= n as f64;
    }
    assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
}

#[test]
fn paired_t_by_hand() {
    // d = [1, 2, 3]: mean 2, sd 1, t = 2 / (1/sqrt 3)
    match paired_t(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap() {
        TTest::Value { t, df, p } => {
            assert!((t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
            assert_eq!(df, 2);
            assert!((p - (1.0 - t / (2.0 + t * t).sqrt())).abs() < 1e-12);
        }
        TTest::NotAvailable => panic!("variance is positive"),
    }
    assert!(paired_t(&[1.0], &[2.0]).is_err());
    assert!(paired_t(&[1.0, 2.0], &[2.0]).is_err());
}

#[test]
fn fleiss_kappa_textbook_example() {
    // Fleiss (1971) style 10 x 5 table with 14 raters.
    let rows = vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ];
    let k = fleiss_kappa(&RatingMatrix::new(rows).unwrap()).unwrap();
    assert!((k - 0.209_930_704).abs() < 1e-6, "{k}");
}

#[test]
fn fleiss_kappa_edge_cases() {
    let perfect = RatingMatrix::new(vec![vec![3, 0], vec![0, 3]]).unwrap();
    assert!((fleiss_kappa(&perfect).unwrap() - 1.0).abs() < 1e-12);
    let single = RatingMatrix::new(vec![vec![3, 0], vec![3, 0]]).unwrap();
    assert_eq!(fleiss_kappa(&single), None);
    assert!(RatingMatrix::new(vec![vec![2, 1], vec![1, 1]]).is_err());
    assert!(RatingMatrix::new(vec![]).is_err());
}

proptest! {
    #[test]
    fn continued_fraction_agrees_with_series(x in 0.01f64..0.45, a in 0.5f64..20.0, b in 0.5f64..20.0) {
        let cf = reg_inc_beta(x, a, b);
        let series = reg_inc_beta_series(x, a, b);
        prop_assert!((cf - series).abs() < 1e-9, "{} vs {}", cf, series);
    }

    #[test]
    fn incomplete_beta_symmetry(x in 0.001f64..0.999, a in 0.5f64..30.0, b in 0.5f64..30.0) {
        let s = reg_inc_beta(x, a, b) + reg_inc_beta(1.0 - x, b, a);
        prop_assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn t_tail_is_a_probability_and_decreasing(t in 0.0f64..50.0, df in 1usize..60) {
        let p = student_t_two_sided(t, df as f64);
        let q = student_t_two_sided(t + 0.5, df as f64);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(q <= p + 1e-15);
    }

    #[test]
    fn prf_stays_in_unit_interval(tp in 0u32..50, fp in 0u32..50, fn_ in 0u32..50) {
        let r = ReaderRecord { reader: 1, entity: "X".into(), phase: Phase::Pre, tp, fp, fn_ };
        let p = prf(&r);
        for v in [p.precision, p.recall, p.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(p.f1 <= p.precision.max(p.recall) + 1e-12);
    }
}

#[test]
fn prf_matches_printed_rows() {
    let rec = |tp, fp, fn_| ReaderRecord { reader: 1, entity: "JPS".into(), phase: Phase::Post, tp, fp, fn_ };
    let p = prf(&rec(3, 7, 1));
    assert!((p.precision - 0.300).abs() < 1e-12);
    assert!((p.recall - 0.750).abs() < 1e-12);
    assert!((100.0 * p.f1 - 42.9).abs() < 0.05);
    assert_eq!(prf(&rec(0, 0, 4)), Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
    let h = prf(&rec(1, 1, 1));
    assert_eq!((h.precision, h.recall, h.f1), (0.5, 0.5, 0.5));
}

#[test]
fn paired_t_conventions() {
    let x = [1.0, 2.0, 5.0];
    assert_eq!(paired_t(&x, &x).unwrap(), TTest::NotAvailable);
    match paired_t(&[0.0, 1.0, 0.0], &[2.0, 2.5, 3.0]).unwrap() {
        TTest::Value { t, .. } => assert!(t > 0.0),
        TTest::NotAvailable => panic!(),
    }
}

#[test]
fn report_ignores_reader_order() {
    let mut recs = table1_records();
    let a = reader_report(&recs).unwrap();
    recs.reverse();
    let b = reader_report(&recs).unwrap();
    for e in ["JPS", "CFT", "FAP", "PJS"] {
        for m in Metric::ALL {
            assert_eq!(a.cell(e, m), b.cell(e, m));
        }
    }
}

#[test]
fn fleiss_kappa_small_hand_case() {
    // 4 items x 2 raters over 2 categories
    let rows = vec![vec![2, 0], vec![1, 1], vec![0, 2], vec![2, 0]];
    // P_i = 1, 0, 1, 1 -> P_bar = 0.75; p = (5/8, 3/8) -> Pe = 34/64
    let pe = 34.0 / 64.0;
    let want = (0.75 - pe) / (1.0 - pe);
    let k = fleiss_kappa(&RatingMatrix::new(rows.clone()).unwrap()).unwrap();
    assert!((k - want).abs() < 1e-12);
    // relabelled categories and permuted items
    let mut swapped: Vec<Vec<u32>> = rows.iter().map(|r| vec![r[1], r[0]]).collect();
    swapped.rotate_left(1);
    assert!((fleiss_kappa(&RatingMatrix::new(swapped).unwrap()).unwrap() - k).abs() < 1e-12);
}

#[test]
fn fleiss_kappa_near_zero_for_random_ratings() {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<u32>> = (0..10_000)
        .map(|_| {
            let mut c = vec![0u32; 3];
            for _ in 0..4 {
                c[r.random_range(0..3)] += 1;
            }
            c
        })
        .collect();
    let k = fleiss_kappa(&RatingMatrix::new(rows).unwrap()).unwrap();
    assert!(k.abs() < 0.05, "{k}");
}

#[test]
fn full_agreement_over_mixed_categories() {
    let rows: Vec<Vec<u32>> = (0..10).map(|i| if i % 2 == 0 { vec![3, 0] } else { vec![0, 3] }).collect();
    assert!((fleiss_kappa(&RatingMatrix::new(rows).unwrap()).unwrap() - 1.0).abs() < 1e-12);
}
