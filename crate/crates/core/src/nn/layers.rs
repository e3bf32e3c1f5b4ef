//! Parameterized building blocks. Each layer only records [`ParamId`]s; the
//! tensors live in a [`ParamStore`] so a whole model can be frozen, hashed
//! and serialized as one unit.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, fan_in, fan_out, bias, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_std<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

/// Square-kernel convolution over channels-last images.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Self::with_std(store, name, cin, cout, kernel, stride, pad, (1.0 / fan_in as f64).sqrt(), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[kernel * kernel * cin, cout], std, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, kernel, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.conv2d(x, w, self.kernel, self.stride, self.pad);
        let b = g.param(store, self.b);
        g.add_row_bias(y, b)
    }
}

/// Layer norm over the channel axis.
#[derive(Debug, Clone)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
