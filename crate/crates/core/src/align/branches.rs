//! Per-attribute image branches: a convolutional trunk (shared by default)
//! followed by one projection head per attribute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::same_layout;
use crate::attributes::AttributeKind;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Trunk widths; the first layer keeps full resolution, each later
    /// layer halves it.
    pub widths: [usize; 4],
    pub hidden: usize,
    pub dim: usize,
    /// One trunk per attribute instead of a shared one.
    pub separate_trunks: bool,
    pub init_seed: u64,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: [16, 32, 64, 64],
            hidden: 128,
            dim: 64,
            separate_trunks: false,
            init_seed: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<Conv2d>,
}

impl Trunk {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &BranchConfig, r: &mut ChaCha8Rng) -> Self {
        let mut cin = cfg.channels;
        let convs = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let conv = Conv2d::new(store, &format!("{name}.conv{i}"), cin, c, 3, stride, 1, r);
                cin = c;
                conv
            })
            .collect();
        Self { convs }
    }

    /// Activations after every layer.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let y = c.forward(g, p, h);
            h = g.relu(y);
            out.push(h);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Head {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone)]
pub struct AttributeBranches<S: Scalar> {
    config: BranchConfig,
    params: ParamStore<S>,
    trunks: Vec<Trunk>,
    heads: Vec<Head>,
}

impl<S: Scalar> AttributeBranches<S> {
    pub fn new(config: BranchConfig) -> Result<Self> {
        if config.image_size % 8 != 0 {
            return Err(Error::InvalidArgument(format!("branch input size {} not divisible by 8", config.image_size)));
        }
        let mut r = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let n_trunks = if config.separate_trunks { 4 } else { 1 };
        let trunks = (0..n_trunks).map(|i| Trunk::new(&mut params, &format!("trunk{i}"), &config, &mut r)).collect();
        let side = config.image_size / 8;
        let flat = side * side * config.widths[3];
        let heads = AttributeKind::ALL
            .iter()
            .map(|k| Head {
                l1: Linear::new(&mut params, &format!("head.{}.l1", k.name()), flat, config.hidden, true, &mut r),
                l2: Linear::new(&mut params, &format!("head.{}.l2", k.name()), config.hidden, config.dim, true, &mut r),
            })
            .collect();
        Ok(Self { config, params, trunks, heads })
    }

    pub fn from_parts(config: BranchConfig, stored: ParamStore<S>) -> Result<Self> {
        let mut fresh = Self::new(config)?;
        if !same_layout(&fresh.params, &stored) {
            return Err(Error::Format("stored parameters do not match the branch layout".into()));
        }
        fresh.params = stored;
        Ok(fresh)
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.image_size, c.image_size, c.channels] {
            return Err(Error::Shape(format!(
                "branches expect [B, {}, {}, {}], got {shape:?}",
                c.image_size, c.image_size, c.channels
            )));
        }
        Ok(())
    }

    /// Per-attribute embeddings `[B, D]` in [`AttributeKind::ALL`] order.
    pub fn forward(&self, g: &mut Graph<S>, images: Var, unit: bool) -> Result<[Var; 4]> {
        self.check(g.shape(images))?;
        let b = g.shape(images)[0];
        let shared = (!self.config.separate_trunks).then(|| self.trunk_out(g, 0, images, b));
        let mut out = Vec::with_capacity(4);
        for (k, head) in self.heads.iter().enumerate() {
            let feat = match shared {
                Some(f) => f,
                None => self.trunk_out(g, k, images, b),
            };
            let h = head.l1.forward(g, &self.params, feat);
            let h = g.relu(h);
            let v = head.l2.forward(g, &self.params, h);
            out.push(if unit { g.l2_normalize_rows(v) } else { v });
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    fn trunk_out(&self, g: &mut Graph<S>, i: usize, images: Var, b: usize) -> Var {
        let acts = self.trunks[i].forward(g, &self.params, images);
        let last = *acts.last().expect("trunk has layers");
        let n: usize = g.shape(last)[1..].iter().product();
        g.reshape(last, &[b, n])
    }

    /// Gradient-free unit embeddings, each `[B, D]`.
    pub fn embed(&self, images: &Tensor<S>) -> Result<[Tensor<S>; 4]> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let vs = self.forward(&mut g, x, true)?;
        Ok(vs.map(|v| g.value(v).clone()))
    }

    /// Activations of every layer of the first trunk, for feature-space
    /// metrics. Each entry is `[B, H_l, W_l, C_l]`.
    pub fn trunk_features(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.check(images.shape())?;
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let acts = self.trunks[0].forward(&mut g, &self.params, x);
        Ok(acts.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
