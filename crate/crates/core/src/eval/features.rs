//! Feature-space image-set metrics: Fréchet distance, pairwise perceptual
//! diversity and image-to-image consistency.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::align::AttributeBranches;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// `n x F` feature matrix tagged with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVectorSet {
    pub source: String,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureVectorSet {
    pub fn new(source: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let f = rows.first().map(Vec::len).unwrap_or(0);
        if f == 0 || rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows must be nonempty and of equal width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self { source: source.into(), rows })
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.rows.len();
        let f = self.dim();
        let x = DMatrix::from_fn(n, f, |i, j| self.rows[i][j]);
        let mu = DVector::from_fn(f, |j, _| x.column(j).sum() / n as f64);
        let mut c = x.clone();
        for j in 0..f {
            for i in 0..n {
                c[(i, j)] -= mu[j];
            }
        }
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        (mu, cov)
    }
}

/// Outcome of a Fréchet distance evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fid {
    pub value: f64,
    /// Negative eigenvalues were clamped to zero in a matrix square root.
    pub clamped: bool,
}

fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    let mut clamped = false;
    let roots = eig.eigenvalues.map(|v| {
        if v < -1e-10 * scale {
            clamped = true;
        }
        v.max(0.0).sqrt()
    });
    let u = &eig.eigenvectors;
    (u * DMatrix::from_diagonal(&roots) * u.transpose(), clamped)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of
/// the square root taken as `Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn fid(a: &FeatureVectorSet, b: &FeatureVectorSet) -> Result<Fid> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    if a.rows.len() < 2 || b.rows.len() < 2 {
        return Err(Error::InvalidArgument("Fréchet distance needs at least two samples per set".into()));
    }
    let (ma, sa) = a.moments();
    let (mb, sb) = b.moments();
    let (ra, c1) = sqrt_psd(&sa);
    let inner = &ra * &sb * &ra;
    let (root, c2) = sqrt_psd(&inner);
    let clamped = c1 || c2;
    if clamped {
        log::warn!("fid: clamped negative eigenvalues ({} vs {})", a.source, b.source);
    }
    let value = (&ma - &mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * root.trace();
    Ok(Fid { value: value.max(0.0), clamped })
}

/// Layered image features for perceptual metrics.
pub trait FeatureExtractor<S: Scalar> {
    /// Per-layer activations for a `[B, H, W, C]` batch.
    fn layers(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>>;
    /// One embedding vector per image.
    fn embed(&self, images: &Tensor<S>) -> Result<Vec<Vec<f64>>>;
}

/// The raw pixels as a single layer and as the embedding.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<S: Scalar> FeatureExtractor<S> for IdentityExtractor {
    fn layers(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        Ok(vec![images.clone()])
    }

    fn embed(&self, images: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        let b = images.shape()[0];
        Ok((0..b).map(|i| images.item(i).data().iter().map(|v| v.f64()).collect()).collect())
    }
}

/// Frozen alignment trunk. Embeddings are the last layer averaged over a
/// 2x2 grid of spatial cells.
pub struct TrunkExtractor<'a, S: Scalar>(pub &'a AttributeBranches<S>);

impl<S: Scalar> FeatureExtractor<S> for TrunkExtractor<'_, S> {
    fn layers(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.0.trunk_features(images)
    }

    fn embed(&self, images: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        let layers = self.0.trunk_features(images)?;
        let last = layers.last().expect("trunk has layers");
        let s = last.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut v = vec![0.0; 4 * c];
            for y in 0..h {
                for x in 0..w {
                    let cell = 2 * (2 * y / h) + 2 * x / w;
                    let base = ((i * h + y) * w + x) * c;
                    for ch in 0..c {
                        v[cell * c + ch] += last.data()[base + ch].f64();
                    }
                }
            }
            let per = (h * w / 4).max(1) as f64;
            out.push(v.into_iter().map(|x| x / per).collect());
        }
        Ok(out)
    }
}

fn stack<S: Scalar>(images: &[Tensor<S>]) -> Tensor<S> {
    Tensor::stack(images)
}

/// Distance between images `i` and `j` of a layer stack: per layer, channel
/// vectors are scaled to unit length at every position and the squared
/// difference is averaged over positions; layers are weighted equally.
fn layered_distance<S: Scalar>(layers: &[Tensor<S>], i: usize, j: usize) -> f64 {
    fn unit<S: Scalar>(v: &[S]) -> impl Iterator<Item = f64> + '_ {
        let n = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt() + 1e-10;
        v.iter().map(move |x| x.f64() / n)
    }
    let l = layers.len() as f64;
    layers
        .iter()
        .map(|t| {
            let per = t.len() / t.shape()[0];
            let c = *t.shape().last().expect("layer rank");
            let a = &t.data()[i * per..(i + 1) * per];
            let b = &t.data()[j * per..(j + 1) * per];
            let sq: f64 = a
                .chunks(c)
                .zip(b.chunks(c))
                .map(|(x, y)| unit(x).zip(unit(y)).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
                .sum();
            sq / (per / c) as f64
        })
        .sum::<f64>()
        / l
}

/// Mean layered feature distance over all unordered pairs.
pub fn perceptual_diversity<S: Scalar>(images: &[Tensor<S>], extractor: &dyn FeatureExtractor<S>) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two images".into()));
    }
    let layers = extractor.layers(&stack(images))?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += layered_distance(&layers, i, j);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

/// Mean over generated images of the best cosine similarity to any
/// reference, in embedding space.
pub fn consistency_from_embeddings(generated: &[Vec<f64>], references: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::InvalidArgument("consistency needs generated and reference images".into()));
    }
    Ok(generated
        .iter()
        .map(|g| references.iter().map(|r| cos(g, r)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / generated.len() as f64)
}

pub fn image_consistency<S: Scalar>(
    generated: &[Tensor<S>],
    references: &[Tensor<S>],
    extractor: &dyn FeatureExtractor<S>,
) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::InvalidArgument("consistency needs generated and reference images".into()));
    }
    let g = extractor.embed(&stack(generated))?;
    let r = extractor.embed(&stack(references))?;
    consistency_from_embeddings(&g, &r)
}

/// Embeddings of an image list as a feature set.
pub fn feature_set<S: Scalar>(
    source: &str,
    images: &[Tensor<S>],
    extractor: &dyn FeatureExtractor<S>,
) -> Result<FeatureVectorSet> {
    FeatureVectorSet::new(source, extractor.embed(&stack(images))?)
}
