//! Closed attribute vocabularies and the per-lesion [`AttributeSet`].
//!
//! Four attributes with four tokens each. The token strings are invented
//! stand-ins and carry no clinical meaning; only their index matters to the
//! renderer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::ReportError;

/// Version of the built-in vocabulary manifest.
pub const VOCAB_VERSION: u32 = 1;

/// Number of tokens per attribute.
pub const VOCAB_SIZE: usize = 4;

/// Total number of attribute combinations.
pub const COMBINATIONS: usize = VOCAB_SIZE * VOCAB_SIZE * VOCAB_SIZE * VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Morphology,
    Color,
    Pathology,
    Location,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] =
        [AttributeKind::Morphology, AttributeKind::Color, AttributeKind::Pathology, AttributeKind::Location];

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Morphology => "morphology",
            AttributeKind::Color => "color",
            AttributeKind::Pathology => "pathology",
            AttributeKind::Location => "location",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Token strings of this attribute, in index order.
    pub fn tokens(self) -> [&'static str; VOCAB_SIZE] {
        match self {
            AttributeKind::Morphology => Morphology::ALL.map(Morphology::as_str),
            AttributeKind::Color => Color::ALL.map(Color::as_str),
            AttributeKind::Pathology => Pathology::ALL.map(Pathology::as_str),
            AttributeKind::Location => Location::ALL.map(Location::as_str),
        }
    }

    /// Index of `token` in this attribute's vocabulary (exact, lowercase).
    pub fn lookup(self, token: &str) -> Option<usize> {
        self.tokens().iter().position(|t| *t == token)
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

macro_rules! vocab_enum {
    ($name:ident, $kind:expr, [$($variant:ident => $text:literal),+ $(,)?]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: [$name; VOCAB_SIZE] = [$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Self {
                Self::ALL[i]
            }
        }

        impl FromStr for $name {
            type Err = ReportError;

            fn from_str(s: &str) -> std::result::Result<Self, ReportError> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| ReportError::UnknownToken { slot: $kind, token: s.to_string() })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

vocab_enum!(Morphology, AttributeKind::Morphology, [
    Pedunculated => "pedunculated",
    Sessile => "sessile",
    Flat => "flat",
    Clustered => "clustered",
]);

vocab_enum!(Color, AttributeKind::Color, [
    Red => "red",
    Pale => "pale",
    Yellow => "yellow",
    Brown => "brown",
]);

vocab_enum!(Pathology, AttributeKind::Pathology, [
    Hamartomatous => "hamartomatous",
    Adenomatous => "adenomatous",
    Hyperplastic => "hyperplastic",
    Fibrous => "fibrous",
]);

vocab_enum!(Location, AttributeKind::Location, [
    Sigmoid => "sigmoid",
    Rectum => "rectum",
    Stomach => "stomach",
    Duodenum => "duodenum",
]);

/// The four clinical attributes of one lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeSet {
    pub morphology: Morphology,
    pub color: Color,
    pub pathology: Pathology,
    pub location: Location,
}

impl AttributeSet {
    pub fn new(morphology: Morphology, color: Color, pathology: Pathology, location: Location) -> Self {
        Self { morphology, color, pathology, location }
    }

    /// Token index per attribute, in [`AttributeKind::ALL`] order.
    pub fn indices(&self) -> [usize; 4] {
        [self.morphology.index(), self.color.index(), self.pathology.index(), self.location.index()]
    }

    pub fn from_indices(ix: [usize; 4]) -> Self {
        Self {
            morphology: Morphology::from_index(ix[0]),
            color: Color::from_index(ix[1]),
            pathology: Pathology::from_index(ix[2]),
            location: Location::from_index(ix[3]),
        }
    }

    pub fn get(&self, kind: AttributeKind) -> usize {
        self.indices()[kind.index()]
    }

    pub fn token(&self, kind: AttributeKind) -> &'static str {
        kind.tokens()[self.get(kind)]
    }

    /// Copy with one slot replaced by token index `value`.
    pub fn with(&self, kind: AttributeKind, value: usize) -> Self {
        let mut ix = self.indices();
        ix[kind.index()] = value;
        Self::from_indices(ix)
    }

    /// Dense id in `0..COMBINATIONS`.
    pub fn combination_id(&self) -> usize {
        let [m, c, p, l] = self.indices();
        ((m * VOCAB_SIZE + c) * VOCAB_SIZE + p) * VOCAB_SIZE + l
    }

    pub fn from_combination_id(id: usize) -> Self {
        assert!(id < COMBINATIONS, "combination id out of range");
        let l = id % VOCAB_SIZE;
        let p = (id / VOCAB_SIZE) % VOCAB_SIZE;
        let c = (id / (VOCAB_SIZE * VOCAB_SIZE)) % VOCAB_SIZE;
        let m = id / (VOCAB_SIZE * VOCAB_SIZE * VOCAB_SIZE);
        Self::from_indices([m, c, p, l])
    }

    /// Every combination, in combination-id order.
    pub fn all() -> impl Iterator<Item = AttributeSet> {
        (0..COMBINATIONS).map(Self::from_combination_id)
    }
}

/// A named held-out class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RareClass {
    pub name: String,
    pub attributes: AttributeSet,
}

/// The four held-out toy classes, named after the entities they stand in for.
pub fn default_rare_classes() -> Vec<RareClass> {
    use Color::*;
    use Location::*;
    use Morphology::*;
    use Pathology::*;
    [
        ("JPS", AttributeSet::new(Pedunculated, Red, Hamartomatous, Sigmoid)),
        ("CFT", AttributeSet::new(Sessile, Pale, Fibrous, Stomach)),
        ("FAP", AttributeSet::new(Clustered, Brown, Adenomatous, Rectum)),
        ("PJS", AttributeSet::new(Flat, Yellow, Hyperplastic, Duodenum)),
    ]
    .into_iter()
    .map(|(n, a)| RareClass { name: n.to_string(), attributes: a })
    .collect()
}

/// Versioned vocabulary manifest persisted next to a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub version: u32,
    pub morphology: Vec<String>,
    pub color: Vec<String>,
    pub pathology: Vec<String>,
    pub location: Vec<String>,
    #[serde(default)]
    pub rare: Vec<RareClass>,
}

impl Default for VocabManifest {
    fn default() -> Self {
        let list = |k: AttributeKind| k.tokens().iter().map(|s| s.to_string()).collect();
        Self {
            version: VOCAB_VERSION,
            morphology: list(AttributeKind::Morphology),
            color: list(AttributeKind::Color),
            pathology: list(AttributeKind::Pathology),
            location: list(AttributeKind::Location),
            rare: default_rare_classes(),
        }
    }
}

impl VocabManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Parse and check a manifest against the built-in vocabulary.
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: VocabManifest = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != VOCAB_VERSION {
            return Err(Error::Format(format!("unsupported vocabulary version {}", self.version)));
        }
        let builtin = VocabManifest::default();
        let pairs = [
            (&self.morphology, &builtin.morphology, AttributeKind::Morphology),
            (&self.color, &builtin.color, AttributeKind::Color),
            (&self.pathology, &builtin.pathology, AttributeKind::Pathology),
            (&self.location, &builtin.location, AttributeKind::Location),
        ];
        for (got, want, kind) in pairs {
            if got != want {
                return Err(Error::Format(format!("{kind} vocabulary differs from version {VOCAB_VERSION}")));
            }
        }
        Ok(())
    }

    pub fn holdouts(&self) -> Vec<AttributeSet> {
        self.rare.iter().map(|r| r.attributes).collect()
    }

    pub fn rare_class(&self, name: &str) -> Option<&RareClass> {
        self.rare.iter().find(|r| r.name.eq_ignore_ascii_case(name))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn vocabularies_are_pairwise_disjoint() {
        let mut seen = HashSet::new();
        for k in AttributeKind::ALL {
            for t in k.tokens() {
                assert!(seen.insert(t), "{t} appears twice");
            }
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn combination_id_is_a_bijection() {
        let ids: HashSet<_> = AttributeSet::all().map(|a| a.combination_id()).collect();
        assert_eq!(ids.len(), COMBINATIONS);
        for id in [0, 17, 255] {
            assert_eq!(AttributeSet::from_combination_id(id).combination_id(), id);
        }
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = VocabManifest::default();
        let back = VocabManifest::from_toml(&m.to_toml()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_with_foreign_vocabulary_is_rejected() {
        let mut m = VocabManifest::default();
        m.color[0] = "purple".into();
        assert!(VocabManifest::from_toml(&m.to_toml()).is_err());
    }

    #[test]
    fn rare_classes_are_distinct_in_identity_slots() {
        let rare = default_rare_classes();
        let morph: HashSet<_> = rare.iter().map(|r| r.attributes.morphology).collect();
        let path: HashSet<_> = rare.iter().map(|r| r.attributes.pathology).collect();
        assert_eq!(morph.len(), 4);
        assert_eq!(path.len(), 4);
    }
}
