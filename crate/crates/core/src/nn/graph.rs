//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape built during one forward pass. Every operation
//! appends a node; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! trainable leaf. Nodes that depend only on constants are skipped, which is
//! what makes frozen-backbone optimization cheap.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution over `[B, H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_width(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRowBias(Var, Var),
    AddBatchChan(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Silu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    SoftmaxLast(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<S> },
    Upsample2x(Var),
    ConcatLast(Var, Var),
    ConcatAxis1(Var, Var),
    Reshape(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Gather { table: Var, ids: Vec<usize> },
    BroadcastBatch(Var),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<S> },
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<(u64, ParamId), Var>,
    inference: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_rows<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), inference: false }
    }

    /// Tape on which every parameter is a constant, for gradient-free
    /// evaluation.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Parameters of frozen stores enter the
    /// tape as constants. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !store.is_frozen() && !self.inference;
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    /// Gradients of every parameter of `store` touched by this tape, in
    /// store order; untouched parameters yield `None`.
    pub fn param_grads(&self, store: &ParamStore<S>) -> Vec<Option<Tensor<S>>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.uid(), ParamId(i)))
                    .and_then(|v| self.grads.get(v.0).and_then(|g| g.clone()))
            })
            .collect()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x[.., C] + b[C]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.last_dim();
        assert_eq!(bv.len(), c, "bias width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRowBias(x, b), ng)
    }

    /// `x[B, .., C] + y[B, C]`, broadcasting `y` over the middle axes.
    pub fn add_batch_chan(&mut self, x: Var, y: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        let b = xv.shape()[0];
        let c = xv.last_dim();
        assert_eq!(yv.shape(), &[b, c], "per-batch channel shape mismatch");
        let per = xv.len() / b;
        let mut out = xv.clone();
        for (bi, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let yrow = yv.row(bi);
            for row in chunk.chunks_mut(c) {
                for (o, &yy) in row.iter_mut().zip(yrow) {
                    *o += yy;
                }
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(out, Op::AddBatchChan(x, y), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (S::one() + (-z).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.max(S::zero()));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `x[.., K] * w[K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, k) = as_rows(xv);
        assert_eq!(wv.shape().len(), 2, "weight must be 2-D");
        assert_eq!(wv.shape()[0], k, "matmul inner dimension mismatch");
        let n = wv.shape()[1];
        let mut out = vec![S::zero(); rows * n];
        S::gemm(rows, k, n, S::one(), xv.data(), k as isize, 1, wv.data(), n as isize, 1, S::zero(), &mut out, n as isize, 1);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&shape, out), Op::MatMul(x, w), ng)
    }

    /// Batched product `a[B, N, K] * b[B, K, M]`; with `trans_b` the second
    /// operand is stored as `[B, M, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, m) = if trans_b { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        assert_eq!(bv.shape()[0], bs, "bmm batch mismatch");
        assert_eq!(bk, k, "bmm inner dimension mismatch");
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (m as isize, 1) };
        let mut out = vec![S::zero(); bs * n * m];
        for i in 0..bs {
            S::gemm(
                n,
                k,
                m,
                S::one(),
                &av.data()[i * n * k..(i + 1) * n * k],
                k as isize,
                1,
                &bv.data()[i * k * m..(i + 1) * k * m],
                rsb,
                csb,
                S::zero(),
                &mut out[i * n * m..(i + 1) * n * m],
                m as isize,
                1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[bs, n, m], out), Op::Bmm { a, b, trans_b }, ng)
    }

    // ---------------------------------------------------------------------
    // normalization

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = S::c(1e-5);
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut out = vec![S::zero(); xv.len()];
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let cn = S::c(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bta[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let c = v.last_dim();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxLast(x), ng)
    }

    /// Unit-normalize each row of the last axis.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let c = v.last_dim();
        let mut norms = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&a| a * a).sum::<S>().sqrt().max(S::c(1e-12));
            norms.push(n);
            for a in row.iter_mut() {
                *a /= n;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::L2NormalizeRows { x, norms }, ng)
    }

    // ---------------------------------------------------------------------
    // spatial

    /// Convolution of `x[B, H, W, Cin]` with `w[k*k*Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "conv2d expects [B, H, W, C]");
        let geom = ConvGeom { batch: s[0], height: s[1], width: s[2], in_ch: s[3], kernel, stride, pad };
        let wv = self.value(w);
        assert_eq!(wv.shape()[0], geom.col_width(), "conv weight rows mismatch");
        let cout = wv.shape()[1];
        let (ho, wo) = geom.out_hw();
        let cols = im2col(xv.data(), &geom);
        let rows = geom.batch * ho * wo;
        let kc = geom.col_width();
        let mut out = vec![S::zero(); rows * cout];
        S::gemm(rows, kc, cout, S::one(), &cols, kc as isize, 1, wv.data(), cout as isize, 1, S::zero(), &mut out, cout as isize, 1);
        let ng = self.ng(x) || self.ng(w);
        let cols = if ng { cols } else { Vec::new() };
        self.push(Tensor::new(&[geom.batch, ho, wo, cout], out), Op::Conv2d { x, w, geom, cols }, ng)
    }

    /// Nearest-neighbour 2x upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![S::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, 2 * h, 2 * w, c], out), Op::Upsample2x(x), ng)
    }

    /// `[B, H, W, C] -> [B, H/f, W/f, f*f*C]`, sub-pixel order `(dy, dx, c)`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Var {
        let out = space_to_depth(self.value(x), f);
        let ng = self.ng(x);
        self.push(out, Op::SpaceToDepth(x, f), ng)
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Var {
        let out = depth_to_space(self.value(x), f);
        let ng = self.ng(x);
        self.push(out, Op::DepthToSpace(x, f), ng)
    }

    // ---------------------------------------------------------------------
    // shape

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        assert_eq!(av.rows(), bv.rows(), "concat row mismatch");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::ConcatLast(a, b), ng)
    }

    /// `[B, N1, D] ++ [B, N2, D] -> [B, N1 + N2, D]`.
    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bs, n1, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n2 = bv.shape()[1];
        assert_eq!(bv.shape(), &[bs, n2, d], "concat_axis1 shape mismatch");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..bs {
            out.extend_from_slice(&av.data()[i * n1 * d..(i + 1) * n1 * d]);
            out.extend_from_slice(&bv.data()[i * n2 * d..(i + 1) * n2 * d]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[bs, n1 + n2, d], out), Op::ConcatAxis1(a, b), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Rows of `table[V, D]` selected by `ids`, shaped `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.last_dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(Tensor::new(&[ids.len(), d], out), Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Repeat `x` along a new leading axis of size `b`.
    pub fn broadcast_batch(&mut self, x: Var, b: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![b];
        shape.extend_from_slice(xv.shape());
        let mut out = Vec::with_capacity(b * xv.len());
        for _ in 0..b {
            out.extend_from_slice(xv.data());
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::BroadcastBatch(x), ng)
    }

    /// Mean over all middle axes: `[B, .., C] -> [B, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let c = xv.last_dim();
        let per = xv.len() / (b * c);
        let inv = S::one() / S::c(per as f64);
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            for r in 0..per {
                let row = &xv.data()[(bi * per + r) * c..(bi * per + r + 1) * c];
                for j in 0..c {
                    out[bi * c + j] += row[j] * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, c], out), Op::MeanRows(x), ng)
    }

    // ---------------------------------------------------------------------
    // reductions and losses

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let s: S = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / S::c(av.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mse(a, b), ng)
    }

    /// Weighted mean softmax cross-entropy of `logits[B, K]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], weights: Option<&[S]>) -> Var {
        let lv = self.value(logits);
        let k = lv.last_dim();
        let b = lv.rows();
        assert_eq!(labels.len(), b, "one label per row");
        let weights: Vec<S> = match weights {
            Some(w) => w.to_vec(),
            None => vec![S::one(); b],
        };
        let wsum: S = weights.iter().copied().sum();
        let mut probs = lv.data().to_vec();
        let mut loss = S::zero();
        for (r, row) in probs.chunks_mut(k).enumerate() {
            softmax_in_place(row);
            loss -= weights[r] * row[labels[r]].max(S::c(1e-30)).ln();
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / wsum),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), weights, probs },
            ng,
        )
    }

    // ---------------------------------------------------------------------

    /// Back-propagate from the scalar node `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(self.value(root).shape(), S::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<S>) {
        // Borrow juggling: compute contributions first, then accumulate.
        let mut contributions: Vec<(Var, Tensor<S>)> = Vec::with_capacity(3);
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.map(|x| -x)));
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        contributions.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                    }
                    if ng(*b) {
                        contributions.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    contributions.push((*a, g.map(|x| x * s)));
                }
                Op::AddRowBias(x, b) => {
                    contributions.push((*x, g.clone()));
                    if ng(*b) {
                        let c = g.last_dim();
                        let mut gb = vec![S::zero(); c];
                        for row in g.data().chunks(c) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        contributions.push((*b, Tensor::new(&[c], gb)));
                    }
                }
                Op::AddBatchChan(x, y) => {
                    contributions.push((*x, g.clone()));
                    if ng(*y) {
                        let b = g.shape()[0];
                        let c = g.last_dim();
                        let per = g.len() / b;
                        let mut gy = vec![S::zero(); b * c];
                        for (bi, chunk) in g.data().chunks(per).enumerate() {
                            for row in chunk.chunks(c) {
                                for j in 0..c {
                                    gy[bi * c + j] += row[j];
                                }
                            }
                        }
                        contributions.push((*y, Tensor::new(&[b, c], gy)));
                    }
                }
                Op::MatMul(x, w) => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (rows, k) = (xv.rows(), xv.last_dim());
                    let n = wv.shape()[1];
                    if ng(*x) {
                        let mut gx = vec![S::zero(); rows * k];
                        S::gemm(rows, n, k, S::one(), g.data(), n as isize, 1, wv.data(), 1, n as isize, S::zero(), &mut gx, k as isize, 1);
                        contributions.push((*x, Tensor::new(xv.shape(), gx)));
                    }
                    if ng(*w) {
                        let mut gw = vec![S::zero(); k * n];
                        S::gemm(k, rows, n, S::one(), xv.data(), 1, k as isize, g.data(), n as isize, 1, S::zero(), &mut gw, n as isize, 1);
                        contributions.push((*w, Tensor::new(wv.shape(), gw)));
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let m = g.shape()[2];
                    // logical B is [k, m]; stored strides:
                    let (rsb, csb) = if *trans_b { (1isize, k as isize) } else { (m as isize, 1isize) };
                    if ng(*a) {
                        let mut ga = vec![S::zero(); bs * n * k];
                        for i in 0..bs {
                            S::gemm(
                                n,
                                m,
                                k,
                                S::one(),
                                &g.data()[i * n * m..(i + 1) * n * m],
                                m as isize,
                                1,
                                &bv.data()[i * k * m..(i + 1) * k * m],
                                csb,
                                rsb,
                                S::zero(),
                                &mut ga[i * n * k..(i + 1) * n * k],
                                k as isize,
                                1,
                            );
                        }
                        contributions.push((*a, Tensor::new(av.shape(), ga)));
                    }
                    if ng(*b) {
                        let mut gb = vec![S::zero(); bs * k * m];
                        for i in 0..bs {
                            S::gemm(
                                k,
                                n,
                                m,
                                S::one(),
                                &av.data()[i * n * k..(i + 1) * n * k],
                                1,
                                k as isize,
                                &g.data()[i * n * m..(i + 1) * n * m],
                                m as isize,
                                1,
                                S::zero(),
                                &mut gb[i * k * m..(i + 1) * k * m],
                                rsb,
                                csb,
                            );
                        }
                        contributions.push((*b, Tensor::new(bv.shape(), gb)));
                    }
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(val(*x), |gg, z| {
                        let s = S::one() / (S::one() + (-z).exp());
                        gg * (s * (S::one() + z * (S::one() - s)))
                    });
                    contributions.push((*x, gx));
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(val(*x), |gg, z| if z > S::zero() { gg } else { S::zero() });
                    contributions.push((*x, gx));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = g.last_dim();
                    let rows = g.rows();
                    let gam = val(*gamma).data();
                    if ng(*gamma) || ng(*beta) {
                        let mut gg = vec![S::zero(); c];
                        let mut gbt = vec![S::zero(); c];
                        for r in 0..rows {
                            for j in 0..c {
                                let d = g.data()[r * c + j];
                                gg[j] += d * xhat[r * c + j];
                                gbt[j] += d;
                            }
                        }
                        contributions.push((*gamma, Tensor::new(&[c], gg)));
                        contributions.push((*beta, Tensor::new(&[c], gbt)));
                    }
                    if ng(*x) {
                        let cn = S::c(c as f64);
                        let mut gx = vec![S::zero(); g.len()];
                        for r in 0..rows {
                            let mut m1 = S::zero();
                            let mut m2 = S::zero();
                            for j in 0..c {
                                let dh = g.data()[r * c + j] * gam[j];
                                m1 += dh;
                                m2 += dh * xhat[r * c + j];
                            }
                            m1 /= cn;
                            m2 /= cn;
                            for j in 0..c {
                                let dh = g.data()[r * c + j] * gam[j];
                                gx[r * c + j] = rstd[r] * (dh - m1 - xhat[r * c + j] * m2);
                            }
                        }
                        contributions.push((*x, Tensor::new(g.shape(), gx)));
                    }
                }
                Op::SoftmaxLast(x) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut gx = vec![S::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    contributions.push((*x, Tensor::new(y.shape(), gx)));
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut gx = vec![S::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    contributions.push((*x, Tensor::new(y.shape(), gx)));
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let wv = val(*w);
                    let cout = wv.shape()[1];
                    let (ho, wo) = geom.out_hw();
                    let rows = geom.batch * ho * wo;
                    let kc = geom.col_width();
                    if ng(*w) {
                        let mut gw = vec![S::zero(); kc * cout];
                        S::gemm(kc, rows, cout, S::one(), cols, 1, kc as isize, g.data(), cout as isize, 1, S::zero(), &mut gw, cout as isize, 1);
                        contributions.push((*w, Tensor::new(wv.shape(), gw)));
                    }
                    if ng(*x) {
                        let mut gcols = vec![S::zero(); rows * kc];
                        S::gemm(rows, cout, kc, S::one(), g.data(), cout as isize, 1, wv.data(), 1, cout as isize, S::zero(), &mut gcols, kc as isize, 1);
                        let gx = col2im(&gcols, geom);
                        contributions.push((*x, Tensor::new(&[geom.batch, geom.height, geom.width, geom.in_ch], gx)));
                    }
                }
                Op::Upsample2x(x) => {
                    let s = val(*x).shape();
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut gx = vec![S::zero(); b * h * w * c];
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                                let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                for j in 0..c {
                                    gx[dst + j] += g.data()[src + j];
                                }
                            }
                        }
                    }
                    contributions.push((*x, Tensor::new(s, gx)));
                }
                Op::SpaceToDepth(x, f) => contributions.push((*x, depth_to_space(g, *f))),
                Op::DepthToSpace(x, f) => contributions.push((*x, space_to_depth(g, *f))),
                Op::ConcatLast(a, b) => {
                    let ca = val(*a).last_dim();
                    let cb = val(*b).last_dim();
                    let rows = g.rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    contributions.push((*a, Tensor::new(val(*a).shape(), ga)));
                    contributions.push((*b, Tensor::new(val(*b).shape(), gb)));
                }
                Op::ConcatAxis1(a, b) => {
                    let s = val(*a).shape();
                    let (bs, n1, d) = (s[0], s[1], s[2]);
                    let n2 = val(*b).shape()[1];
                    let mut ga = Vec::with_capacity(bs * n1 * d);
                    let mut gb = Vec::with_capacity(bs * n2 * d);
                    let stride = (n1 + n2) * d;
                    for i in 0..bs {
                        ga.extend_from_slice(&g.data()[i * stride..i * stride + n1 * d]);
                        gb.extend_from_slice(&g.data()[i * stride + n1 * d..(i + 1) * stride]);
                    }
                    contributions.push((*a, Tensor::new(val(*a).shape(), ga)));
                    contributions.push((*b, Tensor::new(val(*b).shape(), gb)));
                }
                Op::Reshape(x) => contributions.push((*x, g.clone().reshape(val(*x).shape()))),
                Op::Gather { table, ids } => {
                    let tv = val(*table);
                    let d = tv.last_dim();
                    let mut gt = vec![S::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    contributions.push((*table, Tensor::new(tv.shape(), gt)));
                }
                Op::BroadcastBatch(x) => {
                    let xv = val(*x);
                    let n = xv.len();
                    let mut gx = vec![S::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (o, &v) in gx.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    contributions.push((*x, Tensor::new(xv.shape(), gx)));
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let b = xv.shape()[0];
                    let c = xv.last_dim();
                    let per = xv.len() / (b * c);
                    let inv = S::one() / S::c(per as f64);
                    let mut gx = vec![S::zero(); xv.len()];
                    for bi in 0..b {
                        for r in 0..per {
                            for j in 0..c {
                                gx[(bi * per + r) * c + j] = g.data()[bi * c + j] * inv;
                            }
                        }
                    }
                    contributions.push((*x, Tensor::new(xv.shape(), gx)));
                }
                Op::SumAll(x) => {
                    let gv = g.data()[0];
                    contributions.push((*x, Tensor::full(val(*x).shape(), gv)));
                }
                Op::MeanAll(x) => {
                    let n = S::c(val(*x).len() as f64);
                    let gv = g.data()[0] / n;
                    contributions.push((*x, Tensor::full(val(*x).shape(), gv)));
                }
                Op::Mse(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let k = g.data()[0] * S::c(2.0) / S::c(av.len() as f64);
                    let diff = av.zip_map(bv, |x, y| (x - y) * k);
                    if ng(*b) {
                        contributions.push((*b, diff.map(|v| -v)));
                    }
                    contributions.push((*a, diff));
                }
                Op::SoftmaxXent { logits, labels, weights, probs } => {
                    let lv = val(*logits);
                    let k = lv.last_dim();
                    let wsum: S = weights.iter().copied().sum();
                    let scale = g.data()[0] / wsum;
                    let mut gl = probs.clone();
                    for (r, row) in gl.chunks_mut(k).enumerate() {
                        row[labels[r]] -= S::one();
                        for v in row.iter_mut() {
                            *v *= weights[r] * scale;
                        }
                    }
                    contributions.push((*logits, Tensor::new(lv.shape(), gl)));
                }
            }
        }
        for (v, t) in contributions {
            self.acc(v, t);
        }
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let (ho, wo) = g.out_hw();
    let c = g.in_ch;
    let kc = g.col_width();
    let mut cols = vec![S::zero(); g.batch * ho * wo * kc];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kc;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * g.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let (ho, wo) = g.out_hw();
    let c = g.in_ch;
    let kc = g.col_width();
    let mut x = vec![S::zero(); g.batch * g.height * g.width * c];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kc;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * g.kernel + kx) * c;
                        for j in 0..c {
                            x[dst + j] += cols[src + j];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn space_to_depth<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(h % f == 0 && w % f == 0, "spatial size not divisible by {f}");
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * ho + y / f) * wo + xx / f) * f * f * c + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::new(&[b, ho, wo, f * f * c], out)
}

pub(crate) fn depth_to_space<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let s = x.shape();
    let (b, ho, wo, cc) = (s[0], s[1], s[2], s[3]);
    let c = cc / (f * f);
    let (h, w) = (ho * f, wo * f);
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((bi * h + y) * w + xx) * c;
                let src = ((bi * ho + y / f) * wo + xx / f) * cc + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}
