//! Reader-study statistics: per-reader precision/recall/F1, paired t-tests
//! with an own Student-t tail, and Fleiss' kappa.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderRecord {
    pub reader: u32,
    pub entity: String,
    pub phase: Phase,
    pub tp: u32,
    pub fp: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 as fractions. Empty denominators give 0.
pub fn prf(rec: &ReaderRecord) -> Prf {
    let ratio = |a: u32, b: u32| if b == 0 { 0.0 } else { f64::from(a) / f64::from(b) };
    let precision = ratio(rec.tp, rec.tp + rec.fp);
    let recall = ratio(rec.tp, rec.tp + rec.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// Power-series form of `I_x(a, b)`, accurate for moderate `x`; used to
/// cross-check the continued fraction.
pub fn reg_inc_beta_series(x: f64, a: f64, b: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0 / a;
    for n in 1..100_000 {
        let n = n as f64;
        term *= (n - b) * x / n;
        let add = term / (a + n);
        sum += add;
        if add.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    (a * x.ln() - ln_beta(a, b)).exp() * sum
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / (df + t * t), 0.5 * df, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TTest {
    Value { t: f64, df: usize, p: f64 },
    /// The differences have zero variance.
    NotAvailable,
}

impl TTest {
    pub fn p(&self) -> Option<f64> {
        match self {
            TTest::Value { p, .. } => Some(*p),
            TTest::NotAvailable => None,
        }
    }
}

/// Paired t-test on `post - pre`.
pub fn paired_t(pre: &[f64], post: &[f64]) -> Result<TTest> {
    if pre.len() != post.len() || pre.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t needs two equal-length samples of at least 2, got {} and {}",
            pre.len(),
            post.len()
        )));
    }
    let n = pre.len() as f64;
    let d: Vec<f64> = post.iter().zip(pre).map(|(b, a)| b - a).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 1e-20 * (1.0 + mean * mean) {
        return Ok(TTest::NotAvailable);
    }
    let t = mean / (var / n).sqrt();
    let df = pre.len() - 1;
    Ok(TTest::Value { t, df, p: student_t_two_sided(t, df as f64) })
}

/// `items x categories` count matrix; every row sums to the rater count.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts.first().ok_or_else(|| Error::InvalidArgument("rating matrix is empty".into()))?;
        let k = first.len();
        let m: u32 = first.iter().sum();
        if m < 2 || k == 0 {
            return Err(Error::InvalidArgument("need at least two raters and one category".into()));
        }
        if counts.iter().any(|r| r.len() != k || r.iter().sum::<u32>() != m) {
            return Err(Error::InvalidArgument("every item needs the same categories and rater count".into()));
        }
        Ok(Self { counts, raters: m })
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }
}

/// Fleiss' kappa; `None` when expected agreement is 1.
pub fn fleiss_kappa(m: &RatingMatrix) -> Option<f64> {
    let n = m.counts.len() as f64;
    let r = f64::from(m.raters);
    let k = m.counts[0].len();
    let p_j: Vec<f64> = (0..k).map(|j| m.counts.iter().map(|row| f64::from(row[j])).sum::<f64>() / (n * r)).collect();
    let p_bar = m
        .counts
        .iter()
        .map(|row| (row.iter().map(|&c| f64::from(c).powi(2)).sum::<f64>() - r) / (r * (r - 1.0)))
        .sum::<f64>()
        / n;
    let pe: f64 = p_j.iter().map(|p| p * p).sum();
    if (1.0 - pe).abs() < 1e-15 {
        None
    } else {
        Some((p_bar - pe) / (1.0 - pe))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::F1];

    fn pick(self, p: &Prf) -> f64 {
        match self {
            Metric::Precision => p.precision,
            Metric::Recall => p.recall,
            Metric::F1 => p.f1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }
}

/// Summary cell in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryCell {
    pub mean_pre: f64,
    pub mean_post: f64,
    pub delta: f64,
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderReport {
    pub entities: Vec<String>,
    pub cells: BTreeMap<(String, Metric), SummaryCell>,
}

impl ReaderReport {
    pub fn cell(&self, entity: &str, metric: Metric) -> Option<&SummaryCell> {
        self.cells.get(&(entity.to_string(), metric))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("entity,metric,mean_pre,mean_post,delta,p\n");
        for e in &self.entities {
            for m in Metric::ALL {
                let c = &self.cells[&(e.clone(), m)];
                let p = c.test.p().map(|p| format!("{p:.4}")).unwrap_or_else(|| "NA".into());
                let _ = writeln!(s, "{e},{},{:.1},{:.1},{:.1},{p}", m.name(), c.mean_pre, c.mean_post, c.delta);
            }
        }
        s
    }

    /// Aligned plain-text summary block.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14}", "");
        for e in &self.entities {
            let _ = write!(s, "{:^24}", e);
        }
        s.push('\n');
        let _ = write!(s, "{:<14}", "");
        for _ in &self.entities {
            let _ = write!(s, "{:>8}{:>8}{:>8}", "Prec", "Rec", "F1");
        }
        s.push('\n');
        let rows: [(&str, fn(&SummaryCell) -> String); 4] = [
            ("Mean (Pre)", |c| format!("{:.1}", c.mean_pre)),
            ("Mean (Post)", |c| format!("{:.1}", c.mean_post)),
            ("Delta Mean", |c| format!("{:.1}", c.delta)),
            ("p (paired t)", |c| c.test.p().map(|p| format!("{p:.4}")).unwrap_or_else(|| "NA".into())),
        ];
        for (label, f) in rows {
            let _ = write!(s, "{label:<14}");
            for e in &self.entities {
                for m in Metric::ALL {
                    let _ = write!(s, "{:>8}", f(&self.cells[&(e.clone(), m)]));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Per-entity means, deltas and paired tests. Every reader must have both
/// phases for every entity.
pub fn reader_report(records: &[ReaderRecord]) -> Result<ReaderReport> {
    let mut by: BTreeMap<(String, u32, Phase), &ReaderRecord> = BTreeMap::new();
    for r in records {
        if by.insert((r.entity.clone(), r.reader, r.phase), r).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate record for reader {} {} {:?}", r.reader, r.entity, r.phase)));
        }
    }
    let mut entities: Vec<String> = Vec::new();
    for r in records {
        if !entities.contains(&r.entity) {
            entities.push(r.entity.clone());
        }
    }
    let mut readers: Vec<u32> = records.iter().map(|r| r.reader).collect();
    readers.sort_unstable();
    readers.dedup();
    let mut cells = BTreeMap::new();
    for e in &entities {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        for &rd in &readers {
            let get = |ph| {
                by.get(&(e.clone(), rd, ph))
                    .ok_or_else(|| Error::InvalidArgument(format!("missing record: reader {rd}, {e}, {ph:?}")))
            };
            pre.push(prf(get(Phase::Pre)?));
            post.push(prf(get(Phase::Post)?));
        }
        for m in Metric::ALL {
            let a: Vec<f64> = pre.iter().map(|p| 100.0 * m.pick(p)).collect();
            let b: Vec<f64> = post.iter().map(|p| 100.0 * m.pick(p)).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mp, mq) = (mean(&a), mean(&b));
            cells.insert((e.clone(), m), SummaryCell { mean_pre: mp, mean_post: mq, delta: mq - mp, test: paired_t(&a, &b)? });
        }
    }
    Ok(ReaderReport { entities, cells })
}

/// Reader counts behind the published per-reader percentages (four positives
/// per entity; rows with 0% precision and 0% recall carry no positive calls).
pub const TABLE1_CSV: &str = "\
reader,entity,phase,tp,fp,fn
1,JPS,Pre,1,5,3
1,JPS,Post,3,7,1
2,JPS,Pre,0,0,4
2,JPS,Post,2,2,2
3,JPS,Pre,0,0,4
3,JPS,Post,3,2,1
4,JPS,Pre,0,0,4
4,JPS,Post,3,3,1
5,JPS,Pre,0,0,4
5,JPS,Post,3,3,1
1,CFT,Pre,0,0,4
1,CFT,Post,4,0,0
2,CFT,Pre,0,0,4
2,CFT,Post,4,1,0
3,CFT,Pre,0,0,4
3,CFT,Post,4,0,0
4,CFT,Pre,1,2,3
4,CFT,Post,4,0,0
5,CFT,Pre,1,2,3
5,CFT,Post,4,0,0
1,FAP,Pre,4,0,0
1,FAP,Post,4,0,0
2,FAP,Pre,4,0,0
2,FAP,Post,4,0,0
3,FAP,Pre,4,0,0
3,FAP,Post,4,0,0
4,FAP,Pre,4,0,0
4,FAP,Post,4,0,0
5,FAP,Pre,4,0,0
5,FAP,Post,4,0,0
1,PJS,Pre,4,0,0
1,PJS,Post,4,0,0
2,PJS,Pre,3,1,1
2,PJS,Post,4,0,0
3,PJS,Pre,4,0,0
3,PJS,Post,4,0,0
4,PJS,Pre,4,0,0
4,PJS,Post,4,0,0
5,PJS,Pre,4,0,0
5,PJS,Post,4,0,0
";

pub fn read_records(csv_text: &str) -> Result<Vec<ReaderRecord>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(|e| Error::Format(e.to_string()))).collect()
}

pub fn table1_records() -> Vec<ReaderRecord> {
    read_records(TABLE1_CSV).expect("built-in table parses")
}
