//! Score-based classifier metrics over one-vs-rest scored samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSampleSet {
    pub entity: String,
    /// `(score, is_positive)`; higher scores mean "more positive".
    pub samples: Vec<(f64, bool)>,
}

impl ScoredSampleSet {
    pub fn new(entity: impl Into<String>, samples: Vec<(f64, bool)>) -> Self {
        Self { entity: entity.into(), samples }
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let pos = self.samples.iter().filter(|s| s.1).count();
        let neg = self.samples.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::InvalidArgument(format!("{}: curve metrics need both labels", self.entity)));
        }
        if self.samples.iter().any(|s| !s.0.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: non-finite score", self.entity)));
        }
        Ok((pos, neg))
    }

    /// Cumulative `(tp, fp)` after each distinct threshold, from the highest
    /// score down; tied scores enter together.
    fn sweep(&self) -> Result<(usize, usize, Vec<(usize, usize)>)> {
        let (pos, neg) = self.counts()?;
        let mut s = self.samples.clone();
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < s.len() {
            let v = s[i].0;
            while i < s.len() && s[i].0 == v {
                if s[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            out.push((tp, fp));
        }
        Ok((pos, neg, out))
    }
}

/// ROC vertices `(fpr, tpr)` starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_points(s: &ScoredSampleSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg, sweep) = s.sweep()?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(sweep.into_iter().map(|(tp, fp)| (fp as f64 / neg as f64, tp as f64 / pos as f64)));
    Ok(pts)
}

/// Trapezoidal area under the ROC vertices.
pub fn roc_auc(s: &ScoredSampleSet) -> Result<f64> {
    let pts = roc_points(s)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over distinct thresholds.
pub fn pr_auc(s: &ScoredSampleSet) -> Result<f64> {
    let (pos, _, sweep) = s.sweep()?;
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (tp, fp) in sweep {
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Ok(ap)
}

/// Highest TPR among operating points with FPR at most `cap`. With
/// `interpolate`, the ROC segment crossing `cap` is linearly interpolated
/// instead.
pub fn tpr_at_fpr(s: &ScoredSampleSet, cap: f64, interpolate: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&cap) {
        return Err(Error::InvalidArgument(format!("fpr cap {cap} outside [0, 1]")));
    }
    let pts = roc_points(s)?;
    let best = pts.iter().filter(|p| p.0 <= cap).map(|p| p.1).fold(0.0, f64::max);
    if !interpolate {
        return Ok(best);
    }
    Ok(pts
        .windows(2)
        .filter(|w| w[0].0 <= cap && w[1].0 > cap)
        .map(|w| w[0].1 + (w[1].1 - w[0].1) * (cap - w[0].0) / (w[1].0 - w[0].0))
        .fold(best, f64::max))
}

/// Area under the ROC polyline between `lo` and `hi` FPR, interpolating at
/// the interval edges.
pub fn pauc(s: &ScoredSampleSet, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("invalid fpr interval [{lo}, {hi}]")));
    }
    let pts = roc_points(s)?;
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let a = x0.max(lo);
        let b = x1.min(hi);
        if b <= a {
            continue;
        }
        let at = |x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        area += (b - a) * (at(a) + at(b)) / 2.0;
    }
    Ok(area)
}
