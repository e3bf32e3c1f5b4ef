//! Joint text/image attribute space: text encoder, per-attribute image
//! branches and the alignment objective.

mod branches;
mod text;

use std::collections::BTreeMap;

pub use branches::{AttributeBranches, BranchConfig};
pub use text::{TextEncoder, TextEncoderConfig, Token, TEMPLATE_WORDS};

use crate::attributes::{AttributeKind, AttributeSet};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// One embedding vector per attribute.
pub type AttributeMap<S> = BTreeMap<AttributeKind, Vec<S>>;

/// `sum_k |v_k - e_k|^2`. Both maps must cover the same attributes with
/// equal dimensions.
pub fn alignment_loss<S: Scalar>(v: &AttributeMap<S>, e: &AttributeMap<S>) -> Result<S> {
    if !v.keys().eq(e.keys()) {
        return Err(Error::InvalidArgument(format!(
            "attribute keys differ: {:?} vs {:?}",
            v.keys().collect::<Vec<_>>(),
            e.keys().collect::<Vec<_>>()
        )));
    }
    let mut total = S::zero();
    for (k, a) in v {
        let b = &e[k];
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{k} embeddings have lengths {} and {}", a.len(), b.len())));
        }
        total += a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>();
    }
    Ok(total)
}

/// Visual attribute embeddings of one `[H, W, C]` image.
pub fn extract_visual_attributes<S: Scalar>(branches: &AttributeBranches<S>, image: &Tensor<S>) -> Result<AttributeMap<S>> {
    let mut s = vec![1];
    s.extend_from_slice(image.shape());
    let vs = branches.embed(&image.clone().reshape(&s))?;
    Ok(AttributeKind::ALL.iter().zip(vs).map(|(&k, t)| (k, t.into_data())).collect())
}

/// Text-side embeddings of an attribute set.
pub fn text_attributes<S: Scalar>(text: &TextEncoder<S>, attrs: &AttributeSet) -> Result<AttributeMap<S>> {
    AttributeKind::ALL
        .iter()
        .map(|&k| Ok((k, text.encode_attribute_text(k, attrs.token(k))?.into_data())))
        .collect()
}

/// Nearest vocabulary token per attribute, by Euclidean distance to the
/// unit text embeddings.
pub struct NearestDecoder<S: Scalar> {
    tables: Vec<Tensor<S>>,
}

impl<S: Scalar> NearestDecoder<S> {
    pub fn new(text: &TextEncoder<S>) -> Self {
        Self { tables: AttributeKind::ALL.iter().map(|&k| text.attribute_table(k, true)).collect() }
    }

    pub fn nearest(&self, kind: AttributeKind, v: &[S]) -> usize {
        let table = &self.tables[kind.index()];
        (0..table.rows())
            .map(|i| {
                let d: f64 = table.row(i).iter().zip(v).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
                (i, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("vocabulary is nonempty")
    }

    pub fn decode(&self, v: &AttributeMap<S>) -> AttributeSet {
        let mut ix = [0; 4];
        for k in AttributeKind::ALL {
            ix[k.index()] = self.nearest(k, &v[&k]);
        }
        AttributeSet::from_indices(ix)
    }

    /// Decode a batch `[B, H, W, C]`.
    pub fn decode_images(&self, branches: &AttributeBranches<S>, images: &Tensor<S>) -> Result<Vec<AttributeSet>> {
        let vs = branches.embed(images)?;
        let b = images.shape()[0];
        Ok((0..b)
            .map(|i| {
                let mut ix = [0; 4];
                for k in AttributeKind::ALL {
                    ix[k.index()] = self.nearest(k, vs[k.index()].row(i));
                }
                AttributeSet::from_indices(ix)
            })
            .collect())
    }
}
