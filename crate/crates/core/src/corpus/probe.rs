//! Rule-based attribute probe.
//!
//! Fixed thresholds on mask geometry, chromaticity ratios, directional
//! texture energy and centroid position. It never sees training data; it is
//! the reference reader for rendered and generated frames alike.

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSet, Color, Location, Morphology, Pathology};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

const CHROMA_THRESHOLD: f64 = 0.02;
const MIN_COMPONENT: usize = 3;
const TEXTURE_THRESHOLD: f64 = 0.075;
const TEXTURE_LAG: usize = 2;

/// Measurements the decision rules act on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFeatures {
    pub area: usize,
    pub aspect: f64,
    pub fill: f64,
    /// Fraction of lesion pixels in a small disc around the box centre.
    pub centre_fill: f64,
    pub centroid: [f64; 2],
    pub green_ratio: f64,
    pub blue_ratio: f64,
    pub energy_x: f64,
    pub energy_y: f64,
}

impl ProbeFeatures {
    pub fn decide(&self, size: [usize; 2]) -> AttributeSet {
        let morphology = if self.aspect > 1.45 {
            Morphology::Flat
        } else if self.aspect < 0.8 {
            Morphology::Pedunculated
        } else if self.centre_fill < 0.5 {
            Morphology::Clustered
        } else {
            Morphology::Sessile
        };
        let color = if self.blue_ratio > 0.5 {
            Color::Pale
        } else if self.green_ratio > 0.72 {
            Color::Yellow
        } else if self.green_ratio > 0.38 {
            Color::Brown
        } else {
            Color::Red
        };
        let pathology = match (self.energy_x > TEXTURE_THRESHOLD, self.energy_y > TEXTURE_THRESHOLD) {
            (false, false) => Pathology::Hyperplastic,
            (true, false) => Pathology::Fibrous,
            (false, true) => Pathology::Adenomatous,
            (true, true) => Pathology::Hamartomatous,
        };
        let right = self.centroid[0] >= size[1] as f64 / 2.0;
        let lower = self.centroid[1] >= size[0] as f64 / 2.0;
        let location = Location::from_index(usize::from(right) + 2 * usize::from(lower));
        AttributeSet { morphology, color, pathology, location }
    }
}

/// Lesion pixels: positive red-minus-blue chroma, keeping only
/// 4-connected components of at least `MIN_COMPONENT` pixels.
fn lesion_mask(rgb: &[[f64; 3]], h: usize, w: usize) -> Vec<bool> {
    let raw: Vec<bool> = rgb.iter().map(|p| p[0] - p[2] > CHROMA_THRESHOLD).collect();
    let mut keep = vec![false; raw.len()];
    let mut seen = vec![false; raw.len()];
    let mut stack = Vec::new();
    let mut comp = Vec::new();
    for start in 0..raw.len() {
        if !raw[start] || seen[start] {
            continue;
        }
        comp.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if raw[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if comp.len() >= MIN_COMPONENT {
            for &i in &comp {
                keep[i] = true;
            }
        }
    }
    keep
}

fn erode(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..mask.len())
        .map(|i| {
            let (y, x) = (i / w, i % w);
            mask[i]
                && x > 0
                && x + 1 < w
                && y > 0
                && y + 1 < h
                && mask[i - 1]
                && mask[i + 1]
                && mask[i - w]
                && mask[i + w]
        })
        .collect()
}

/// Whether `i` and `j = i + lag * step` lie on one row (`step == 1`) or
/// one column.
fn same_line(i: usize, j: usize, step: usize, w: usize) -> bool {
    if step == 1 {
        i / w == j / w
    } else {
        i % w == j % w
    }
}

/// Measure a `[H, W, 3]` frame with values in `[-1, 1]`.
pub fn probe_features<S: Scalar>(image: &Tensor<S>) -> Result<ProbeFeatures> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("probe expects [H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let rgb: Vec<[f64; 3]> = image
        .data()
        .chunks_exact(3)
        .map(|p| [(p[0].f64() + 1.0) / 2.0, (p[1].f64() + 1.0) / 2.0, (p[2].f64() + 1.0) / 2.0])
        .collect();
    let mask = lesion_mask(&rgb, h, w);
    let area = mask.iter().filter(|&&m| m).count();
    if area == 0 {
        return Err(Error::NoLesion);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
    }
    let bw = (x1 - x0 + 1) as f64;
    let bh = (y1 - y0 + 1) as f64;

    let (bx, by) = ((x0 + x1 + 1) as f64 / 2.0, (y0 + y1 + 1) as f64 / 2.0);
    let rad2 = (0.2 * bw.min(bh)).max(1.0).powi(2);
    let (mut inner, mut inner_hits) = (0usize, 0usize);
    for i in 0..mask.len() {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        if (x - bx).powi(2) + (y - by).powi(2) <= rad2 {
            inner += 1;
            inner_hits += usize::from(mask[i]);
        }
    }

    let interior = {
        let e = erode(&mask, h, w);
        if e.iter().any(|&m| m) {
            e
        } else {
            mask.clone()
        }
    };
    let mut sums = [0.0f64; 3];
    for (p, _) in rgb.iter().zip(&interior).filter(|(_, &m)| m) {
        for c in 0..3 {
            sums[c] += p[c];
        }
    }
    let red = sums[0].max(1e-12);

    let lum: Vec<f64> = rgb.iter().map(|p| p[0] + p[1] + p[2]).collect();
    let n_int = interior.iter().filter(|&&m| m).count() as f64;
    let mean_lum = (sums[0] + sums[1] + sums[2]) / n_int;
    // luminance smoothed across the measured direction, then differenced at
    // a lag near half the texture period; pixel noise enters both lags alike
    // while the pattern does not
    let smooth = |i: usize, across: usize| (lum[i - across] + lum[i] + lum[i + across]) / 3.0;
    let energy = |step: usize, across: usize| {
        let (mut acc, mut cnt) = (0.0, 0usize);
        for i in 0..lum.len() {
            let j = i + TEXTURE_LAG * step;
            if j < lum.len() && interior[i] && interior[j] && same_line(i, j, step, w) {
                acc += (smooth(j, across) - smooth(i, across)).abs();
                cnt += 1;
            }
        }
        if cnt == 0 || mean_lum <= 0.0 {
            0.0
        } else {
            acc / cnt as f64 / mean_lum
        }
    };
    let energy_x = energy(1, w);
    let energy_y = energy(w, 1);

    Ok(ProbeFeatures {
        area,
        aspect: bw / bh,
        fill: area as f64 / (bw * bh),
        centre_fill: if inner == 0 { 0.0 } else { inner_hits as f64 / inner as f64 },
        centroid: [sx / area as f64, sy / area as f64],
        green_ratio: sums[1] / red,
        blue_ratio: sums[2] / red,
        energy_x,
        energy_y,
    })
}

/// Read all four attributes off a frame.
pub fn probe<S: Scalar>(image: &Tensor<S>) -> Result<AttributeSet> {
    let f = probe_features(image)?;
    let s = image.shape();
    Ok(f.decide([s[0], s[1]]))
}
