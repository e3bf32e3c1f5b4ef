use super::params::ParamStore;
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to the tensors of `store` given per-parameter grads.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        let mut slots = store.slices_mut();
        self.step_slices(&mut slots, grads);
    }

    /// Update arbitrary parameter slices (e.g. a free-standing embedding).
    pub fn step_slices(&mut self, params: &mut [&mut [S]], grads: &[Option<Tensor<S>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        self.step += 1;
        let mut scale = 1.0;
        if let Some(maxn) = self.clip_norm {
            let sq: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum();
            let n = sq.sqrt();
            if n > maxn {
                scale = maxn / n;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = S::c(self.lr * bc2.sqrt() / bc1);
        let (b1, b2, eps, sc) = (S::c(self.beta1), S::c(self.beta2), S::c(self.eps), S::c(scale));
        let one = S::one();
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] * sc;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] -= lr_t * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
