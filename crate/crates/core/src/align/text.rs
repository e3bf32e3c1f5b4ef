//! Word-level text encoder standing in for a pretrained CLIP text tower.
//!
//! Each word maps to a table row, passes through a residual MLP block and,
//! inside a sentence, receives a positional vector. A single attribute token
//! is encoded by the same block without position and unit-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeKind;
use crate::error::{Error, Result};
use crate::grammar::ReportError;
use crate::nn::{Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;

/// Non-attribute words of the report template.
pub const TEMPLATE_WORDS: [&str; 9] = ["a", "polyp", "color", "and", "the", "pathology", "is", "located", "at"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { dim: 64, hidden: 128, max_len: 16, init_seed: 1 }
    }
}

const TABLE_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Known(usize),
    /// Out-of-vocabulary word; embedded by a fixed hash-seeded vector.
    Unknown(String),
}

#[derive(Debug, Clone)]
pub struct TextEncoder<S: Scalar> {
    config: TextEncoderConfig,
    words: Vec<String>,
    params: ParamStore<S>,
    table: ParamId,
    pos: ParamId,
    l1: Linear,
    l2: Linear,
}

impl<S: Scalar> TextEncoder<S> {
    pub fn new(config: TextEncoderConfig) -> Self {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        for kind in AttributeKind::ALL {
            words.extend(kind.tokens().iter().map(|t| t.to_string()));
        }
        let mut r = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let table = params.add_randn("text.table", &[words.len(), d], TABLE_STD, &mut r);
        let pos = params.add_randn("text.pos", &[config.max_len, d], 0.1, &mut r);
        let l1 = Linear::new(&mut params, "text.l1", d, config.hidden, true, &mut r);
        let l2 = Linear::with_std(&mut params, "text.l2", config.hidden, d, true, 0.5 / (config.hidden as f64).sqrt(), &mut r);
        Self { config, words, params, table, pos, l1, l2 }
    }

    pub fn from_parts(config: TextEncoderConfig, stored: ParamStore<S>) -> Result<Self> {
        let mut fresh = Self::new(config);
        if !same_layout(&fresh.params, &stored) {
            return Err(Error::Format("stored parameters do not match the text encoder layout".into()));
        }
        fresh.params = stored;
        Ok(fresh)
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Lowercased words with `,` and `.` stripped.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c| c == ',' || c == '.').to_ascii_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| match self.word_id(&w) {
                Some(i) => Token::Known(i),
                None => Token::Unknown(w),
            })
            .collect()
    }

    /// Fixed vector for an out-of-vocabulary word.
    pub fn unknown_vector(&self, word: &str) -> Tensor<S> {
        let mut r = rng::stream(self.config.init_seed, &format!("oov/{word}"), 0);
        Tensor::randn(&[self.config.dim], TABLE_STD, &mut r)
    }

    fn block(&self, g: &mut Graph<S>, x: Var) -> Var {
        let h = self.l1.forward(g, &self.params, x);
        let h = g.silu(h);
        let h = self.l2.forward(g, &self.params, h);
        g.add(x, h)
    }

    /// Input rows for a flat token list, `[N, D]`.
    fn rows(&self, g: &mut Graph<S>, tokens: &[&Token]) -> Var {
        let table = g.param(&self.params, self.table);
        let v = self.words.len();
        let mut extra: Vec<&str> = Vec::new();
        let ids: Vec<usize> = tokens
            .iter()
            .map(|t| match t {
                Token::Known(i) => *i,
                Token::Unknown(w) => {
                    let j = extra.iter().position(|e| e == w).unwrap_or_else(|| {
                        extra.push(w);
                        extra.len() - 1
                    });
                    v + j
                }
            })
            .collect();
        if extra.is_empty() {
            return g.gather(table, &ids);
        }
        let d = self.config.dim;
        let oov = Tensor::stack(&extra.iter().map(|w| self.unknown_vector(w)).collect::<Vec<_>>());
        let oov = g.constant(oov.reshape(&[1, extra.len(), d]));
        let t3 = g.reshape(table, &[1, v, d]);
        let all = g.concat_axis1(t3, oov);
        let all = g.reshape(all, &[v + extra.len(), d]);
        g.gather(all, &ids)
    }

    /// Encode equal-length token sequences to `[B, L, D]`.
    pub fn encode_graph(&self, g: &mut Graph<S>, batch: &[Vec<Token>]) -> Result<Var> {
        let l = batch.first().map(Vec::len).unwrap_or(0);
        if l == 0 || batch.iter().any(|s| s.len() != l) {
            return Err(Error::InvalidArgument("token sequences must be nonempty and of equal length".into()));
        }
        if l > self.config.max_len {
            return Err(Error::InvalidArgument(format!("sequence of {l} tokens exceeds {}", self.config.max_len)));
        }
        let flat: Vec<&Token> = batch.iter().flatten().collect();
        let x = self.rows(g, &flat);
        let h = self.block(g, x);
        let h = g.reshape(h, &[batch.len(), l, self.config.dim]);
        let pos = g.param(&self.params, self.pos);
        let pos = g.gather(pos, &(0..l).collect::<Vec<_>>());
        let pos = g.broadcast_batch(pos, batch.len());
        Ok(g.add(h, pos))
    }

    /// Token-embedding sequence `[L, D]` of a text.
    pub fn encode(&self, text: &str) -> Result<Tensor<S>> {
        let tokens = self.tokenize(text);
        let mut g = Graph::inference();
        let v = self.encode_graph(&mut g, &[tokens])?;
        let t = g.value(v).clone();
        let s = t.shape().to_vec();
        Ok(t.reshape(&s[1..]))
    }

    /// Attribute embeddings for word ids, `[N, D]`, unit-normalized unless
    /// `unit` is false.
    pub fn attribute_graph(&self, g: &mut Graph<S>, ids: &[usize], unit: bool) -> Var {
        let table = g.param(&self.params, self.table);
        let x = g.gather(table, ids);
        let h = self.block(g, x);
        if unit {
            g.l2_normalize_rows(h)
        } else {
            h
        }
    }

    /// Unit embedding of one attribute token of the given kind.
    pub fn encode_attribute_text(&self, kind: AttributeKind, token: &str) -> Result<Tensor<S>> {
        let token = token.to_ascii_lowercase();
        if kind.lookup(&token).is_none() {
            return Err(ReportError::UnknownToken { slot: kind, token }.into());
        }
        let id = self.word_id(&token).expect("vocabulary words are in the table");
        let mut g = Graph::inference();
        let v = self.attribute_graph(&mut g, &[id], true);
        Ok(g.value(v).clone().reshape(&[self.config.dim]))
    }

    /// Embeddings of all tokens of one attribute, `[4, D]` in vocabulary
    /// order.
    pub fn attribute_table(&self, kind: AttributeKind, unit: bool) -> Tensor<S> {
        let ids: Vec<usize> = kind.tokens().iter().map(|t| self.word_id(t).expect("in table")).collect();
        let mut g = Graph::inference();
        let v = self.attribute_graph(&mut g, &ids, unit);
        g.value(v).clone()
    }
}

pub(crate) fn same_layout<S: Scalar>(a: &ParamStore<S>, b: &ParamStore<S>) -> bool {
    a.len() == b.len() && a.ids().all(|id| a.name(id) == b.name(id) && a.get(id).shape() == b.get(id).shape())
}
