//! Deterministic formatter and parser for the structured report template
//!
//! ```text
//! a <morphology> polyp, <color> color, and the pathology is <pathology>, located at <location>
//! ```
//!
//! Output is canonical lowercase with single spaces. Input is matched
//! case-insensitively but otherwise exactly: no fuzzy slot recovery.

use thiserror::Error;

use crate::attributes::{AttributeKind, AttributeSet};

const PREFIX: &str = "a ";
const AFTER_MORPHOLOGY: &str = " polyp, ";
const AFTER_COLOR: &str = " color, and the pathology is ";
const AFTER_PATHOLOGY: &str = ", located at ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    /// The text does not follow the template structure; `slot` is the slot
    /// being delimited when the mismatch was found.
    #[error("malformed template near the {slot} slot: {detail}")]
    MalformedTemplate { slot: AttributeKind, detail: String },
    /// A slot holds a single word outside its vocabulary.
    #[error("unknown {slot} token {token:?}")]
    UnknownToken { slot: AttributeKind, token: String },
}

impl ReportError {
    pub fn slot(&self) -> AttributeKind {
        match self {
            ReportError::MalformedTemplate { slot, .. } | ReportError::UnknownToken { slot, .. } => *slot,
        }
    }
}

/// Instantiate the template for `attrs`.
pub fn format_report(attrs: &AttributeSet) -> String {
    format!(
        "a {} polyp, {} color, and the pathology is {}, located at {}",
        attrs.morphology, attrs.color, attrs.pathology, attrs.location
    )
}

/// Recover the unique [`AttributeSet`] whose report equals `text`
/// (ignoring case).
pub fn parse_report(text: &str) -> Result<AttributeSet, ReportError> {
    let lower = text.to_lowercase();
    let malformed = |slot, detail: &str| ReportError::MalformedTemplate { slot, detail: detail.to_string() };

    let rest = lower
        .strip_prefix(PREFIX)
        .ok_or_else(|| malformed(AttributeKind::Morphology, "expected leading \"a \""))?;
    let (morph, rest) = rest
        .split_once(AFTER_MORPHOLOGY)
        .ok_or_else(|| malformed(AttributeKind::Morphology, "expected \" polyp, \" after morphology"))?;
    let (color, rest) = rest
        .split_once(AFTER_COLOR)
        .ok_or_else(|| malformed(AttributeKind::Color, "expected \" color, and the pathology is \""))?;
    let (pathology, location) = rest
        .split_once(AFTER_PATHOLOGY)
        .ok_or_else(|| malformed(AttributeKind::Pathology, "expected \", located at \""))?;

    let slots = [
        (AttributeKind::Morphology, morph),
        (AttributeKind::Color, color),
        (AttributeKind::Pathology, pathology),
        (AttributeKind::Location, location),
    ];
    for (kind, word) in slots {
        if word.is_empty() || !word.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(malformed(kind, "slot must be a single word"));
        }
    }
    let mut ix = [0usize; 4];
    for (kind, word) in slots {
        ix[kind.index()] = kind
            .lookup(word)
            .ok_or_else(|| ReportError::UnknownToken { slot: kind, token: word.to_string() })?;
    }
    Ok(AttributeSet::from_indices(ix))
}
