//! Procedural lesion renderer.
//!
//! Geometry encodes morphology, base chromaticity encodes color, a periodic
//! brightness texture encodes pathology and the quadrant of the lesion centre
//! encodes location. Gain and vignette scale all channels equally, so the
//! chromaticity and relative texture contrast survive them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSet, Color, Morphology, Pathology};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Smallest supported frame edge.
pub const MIN_SIZE: usize = 32;

/// Texture period in pixels at 32x32; scales with the frame.
pub(crate) const TEXTURE_PERIOD: f64 = 6.0;
pub(crate) const TEXTURE_AMPLITUDE: f64 = 0.4;

/// Lesion centre of each location token, as a fraction of the frame.
pub(crate) const QUADRANT_LO: f64 = 0.31;
pub(crate) const QUADRANT_HI: f64 = 0.69;

pub(crate) const BACKGROUND: [f64; 3] = [0.15, 0.28, 0.42];

const SUPERSAMPLE: usize = 3;

/// Non-diagnostic rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Viewpoint shift of the lesion centre in pixels (x, y).
    pub offset: [f64; 2],
    /// Lesion diameter as a fraction of the frame edge.
    pub scale: f64,
    pub gain: f64,
    pub vignette: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self { offset: [0.0, 0.0], scale: 0.45, gain: 1.0, vignette: 0.25 }
    }
}

impl Nuisance {
    pub fn validate(&self, size: usize) -> Result<()> {
        let max_offset = size as f64 / 8.0;
        let checks = [
            (self.offset.iter().all(|o| o.is_finite() && o.abs() <= max_offset), "offset"),
            ((0.1..=0.5).contains(&self.scale), "scale"),
            ((0.5..=1.5).contains(&self.gain), "gain"),
            ((0.0..=1.0).contains(&self.vignette), "vignette"),
        ];
        for (ok, field) in checks {
            if !ok {
                return Err(Error::InvalidArgument(format!("nuisance {field} out of range: {self:?}")));
            }
        }
        Ok(())
    }
}

/// Uniform sampling ranges used when assembling a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRanges {
    pub offset: f64,
    pub scale: [f64; 2],
    pub gain: [f64; 2],
    pub vignette: [f64; 2],
}

impl Default for NuisanceRanges {
    fn default() -> Self {
        Self { offset: 1.0, scale: [0.42, 0.48], gain: [0.75, 1.25], vignette: [0.1, 0.4] }
    }
}

impl NuisanceRanges {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Nuisance {
        let mut u = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let offset = [u(-self.offset, self.offset), u(-self.offset, self.offset)];
        Nuisance {
            offset,
            scale: u(self.scale[0], self.scale[1]),
            gain: u(self.gain[0], self.gain[1]),
            vignette: u(self.vignette[0], self.vignette[1]),
        }
    }
}

/// Everything needed to render one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub attributes: AttributeSet,
    pub nuisance: Nuisance,
    /// Jitters the texture phase, by at most a quarter period.
    pub seed: u64,
}

pub(crate) fn base_color(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.55, 0.12, 0.12],
        Color::Pale => [0.52, 0.42, 0.38],
        Color::Yellow => [0.55, 0.48, 0.10],
        Color::Brown => [0.40, 0.22, 0.07],
    }
}

/// Lesion centre in pixel coordinates (before the viewpoint shift).
pub(crate) fn quadrant_centre(location_index: usize, size: usize) -> [f64; 2] {
    let s = size as f64;
    let fx = if location_index % 2 == 0 { QUADRANT_LO } else { QUADRANT_HI };
    let fy = if location_index < 2 { QUADRANT_LO } else { QUADRANT_HI };
    [fx * s, fy * s]
}

fn inside(m: Morphology, dx: f64, dy: f64, r: f64) -> bool {
    let disc = |cx: f64, cy: f64, rr: f64| (dx - cx).powi(2) + (dy - cy).powi(2) <= rr * rr;
    match m {
        Morphology::Sessile => disc(0.0, 0.0, r),
        Morphology::Flat => (dx / (1.2 * r)).powi(2) + (dy / (0.6 * r)).powi(2) <= 1.0,
        Morphology::Pedunculated => {
            disc(0.0, -0.4 * r, 0.7 * r) || (dx.abs() <= 0.2 * r && dy >= -0.4 * r && dy <= 1.1 * r)
        }
        Morphology::Clustered => {
            let (o, rr) = (0.56 * r, 0.46 * r);
            disc(-o, -o, rr) || disc(o, -o, rr) || disc(-o, o, rr) || disc(o, o, rr)
        }
    }
}

fn texture(p: Pathology, u: f64, v: f64, omega: f64) -> f64 {
    match p {
        Pathology::Hyperplastic => 0.0,
        Pathology::Adenomatous => (omega * v).sin(),
        Pathology::Fibrous => (omega * u).sin(),
        Pathology::Hamartomatous => (omega * u).sin() * (omega * v).sin(),
    }
}

/// Render a `[size, size, 3]` frame with values in `[-1, 1]`.
pub fn render_scene<S: Scalar>(spec: &SceneSpec, size: usize) -> Result<Tensor<S>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("frame size {size} below {MIN_SIZE}")));
    }
    let n = &spec.nuisance;
    n.validate(size)?;
    let a = &spec.attributes;
    let s = size as f64;
    let [qx, qy] = quadrant_centre(a.location.index(), size);
    let (cx, cy) = (qx + n.offset[0], qy + n.offset[1]);
    let r = 0.5 * n.scale * s;
    let period = TEXTURE_PERIOD * s / MIN_SIZE as f64;
    let omega = 2.0 * PI / period;
    // stripes are anchored to the lesion centre up to a small jitter
    let phase_u = (spec.seed % 997) as f64 / 997.0 * period / 4.0;
    let phase_v = (spec.seed / 997 % 991) as f64 / 991.0 * period / 4.0;
    let lesion = base_color(a.color);
    let rho_max2 = 2.0 * (0.5 * s).powi(2);

    let mut out = Vec::with_capacity(size * size * 3);
    let k = SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / k;
                    let py = y as f64 + (sy as f64 + 0.5) / k;
                    let (dx, dy) = (px - cx, py - cy);
                    let rgb = if inside(a.morphology, dx, dy, r) {
                        let m = 1.0 + TEXTURE_AMPLITUDE * texture(a.pathology, dx + phase_u, dy + phase_v, omega);
                        [lesion[0] * m, lesion[1] * m, lesion[2] * m]
                    } else {
                        BACKGROUND
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let rho2 = (x as f64 + 0.5 - 0.5 * s).powi(2) + (y as f64 + 0.5 - 0.5 * s).powi(2);
            let shade = n.gain * (1.0 - n.vignette * rho2 / rho_max2);
            for v in acc {
                let v = (v / (k * k) * shade).clamp(0.0, 1.0);
                out.push(S::c(2.0 * v - 1.0));
            }
        }
    }
    Ok(Tensor::new(&[size, size, 3], out))
}
