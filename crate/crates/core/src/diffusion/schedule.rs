use serde::{Deserialize, Serialize};

use super::denoiser::Prediction;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Forward-process variance table.
///
/// `alpha_bars[t] = prod_{s <= t} (1 - betas[s])` for `t` in `0..steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    betas: Vec<S>,
    alpha_bars: Vec<S>,
}

/// Offset of the cosine schedule's `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
const COSINE_OFFSET: f64 = 0.008;

impl<S: Scalar> NoiseSchedule<S> {
    pub fn build(steps: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..steps)
                    .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(S::c(acc));
        }
        Ok(Self { betas: betas.into_iter().map(S::c).collect(), alpha_bars })
    }

    /// Standard linear schedule, 1000 steps, beta from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::build(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[S] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bars[t]
    }

    /// `alpha_bar` of an optional previous step; `None` is the clean limit (1).
    pub fn alpha_bar_or_one(&self, t: Option<usize>) -> S {
        t.map_or(S::one(), |t| self.alpha_bars[t])
    }

    /// Descending timestep ladder of `n` evenly spaced steps from `T-1` to 0.
    pub fn ladder(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::InvalidArgument(format!("sampling steps must be in 1..={t}, got {n}")));
        }
        if n == 1 {
            return Ok(vec![t - 1]);
        }
        let mut ts: Vec<usize> =
            (0..n).map(|i| ((i as f64) * (t - 1) as f64 / (n - 1) as f64).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// `z_t = sqrt(ab) * z0 + sqrt(1 - ab) * eps` for an explicit `ab`.
pub fn add_noise_at<S: Scalar>(z0: &Tensor<S>, eps: &Tensor<S>, alpha_bar: S) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let a = alpha_bar.sqrt();
    let b = (S::one() - alpha_bar).max(S::zero()).sqrt();
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Forward noising at timestep `t`.
pub fn add_noise<S: Scalar>(z0: &Tensor<S>, eps: &Tensor<S>, t: usize, sched: &NoiseSchedule<S>) -> Result<Tensor<S>> {
    if t >= sched.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 0..{}", sched.steps())));
    }
    add_noise_at(z0, eps, sched.alpha_bar(t))
}

/// Per-item `(sqrt(ab), sqrt(1 - ab))` over the leading axis of `x`.
fn per_item<'a, S: Scalar>(x: &Tensor<S>, abs: &'a [S]) -> impl Iterator<Item = (usize, S, S)> + 'a {
    let (n, per) = (x.len(), x.len() / abs.len().max(1));
    (0..n).map(move |i| {
        let ab = abs[i / per];
        (i, ab.sqrt(), (S::one() - ab).max(S::zero()).sqrt())
    })
}

/// Regression target of a batch noised from `z0` with `eps`, one `ab` per item.
pub fn prediction_target<S: Scalar>(kind: Prediction, z0: &Tensor<S>, eps: &Tensor<S>, abs: &[S]) -> Tensor<S> {
    match kind {
        Prediction::Epsilon => eps.clone(),
        Prediction::Velocity => {
            let (z, e) = (z0.data(), eps.data());
            Tensor::new(z0.shape(), per_item(z0, abs).map(|(i, a, b)| a * e[i] - b * z[i]).collect())
        }
    }
}

/// Noise estimate from a raw network output at `z_t`, one `ab` per item.
pub fn noise_from_output<S: Scalar>(kind: Prediction, out: &Tensor<S>, z_t: &Tensor<S>, abs: &[S]) -> Tensor<S> {
    match kind {
        Prediction::Epsilon => out.clone(),
        Prediction::Velocity => {
            let (v, z) = (out.data(), z_t.data());
            Tensor::new(out.shape(), per_item(out, abs).map(|(i, a, b)| a * v[i] + b * z[i]).collect())
        }
    }
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss<S: Scalar>(eps_true: &Tensor<S>, eps_pred: &Tensor<S>) -> Result<S> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps_true.shape(), eps_pred.shape())));
    }
    let n = S::c(eps_true.len() as f64);
    Ok(eps_true.data().iter().zip(eps_pred.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n)
}

/// One predicted-z0 update between explicit cumulative alphas:
///
/// `z_prev = sqrt(ab_prev) * z0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * noise`,
/// with `z0_hat = (z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
pub fn ddim_update<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    ab_t: S,
    ab_prev: S,
    sigma: S,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("z_t {:?} vs eps {:?}", z_t.shape(), eps_hat.shape())));
    }
    if sigma < S::zero() {
        return Err(Error::InvalidArgument("sigma must be non-negative".into()));
    }
    let dir2 = S::one() - ab_prev - sigma * sigma;
    if dir2 < S::zero() {
        return Err(Error::InvalidArgument(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_prev = {}",
            sigma * sigma,
            S::one() - ab_prev
        )));
    }
    let noise = match (sigma > S::zero(), noise) {
        (true, Some(n)) => {
            if n.shape() != z_t.shape() {
                return Err(Error::Shape("noise shape differs from z_t".into()));
            }
            Some(n)
        }
        (true, None) => return Err(Error::InvalidArgument("sigma > 0 requires a noise sample".into())),
        (false, _) => None,
    };
    let sa_t = ab_t.sqrt();
    let s1a_t = (S::one() - ab_t).sqrt();
    let sa_p = ab_prev.sqrt();
    let dir = dir2.sqrt();
    let mut out = z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - s1a_t * e) / sa_t;
        sa_p * z0 + dir * e
    });
    if let Some(n) = noise {
        for (o, &v) in out.data_mut().iter_mut().zip(n.data()) {
            *o += sigma * v;
        }
    }
    Ok(out)
}

/// DDIM step from `t` to `t_prev` (`None` = fully denoised).
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: Option<usize>,
    sigma: S,
    noise: Option<&Tensor<S>>,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    if t >= sched.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside schedule")));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidArgument(format!("t_prev {p} must be below t {t}")));
        }
    }
    ddim_update(z_t, eps_hat, sched.alpha_bar(t), sched.alpha_bar_or_one(t_prev), sigma, noise)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_step_constant_schedule_by_hand() {
        let s = NoiseSchedule::<f64>::build(2, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_follow_the_closed_form() {
        let s = NoiseSchedule::<f64>::build(1000, 1e-4, 0.999, ScheduleKind::Cosine).unwrap();
        // closed form f(t)/f(0) evaluated independently
        let f = |t: f64| ((t / 1000.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let first = f(1.0) / f(0.0);
        assert!(first > 0.99);
        assert!((s.alpha_bars()[0] - first.min(1.0 - 1e-4)).abs() < 1e-9);
        assert!(s.alpha_bars()[999] < 0.01);
        assert!((s.alpha_bars()[500] - f(501.0) / f(0.0)).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::<f64>::build(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::<f64>::build(1, 0.1, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::<f64>::build(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::<f64>::build(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(
            steps in 2usize..400,
            lo in 1e-5f64..0.05,
            span in 0.0f64..0.3,
            cosine in any::<bool>(),
        ) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = NoiseSchedule::<f64>::build(steps, lo, lo + span, kind).unwrap();
            let ab = s.alpha_bars();
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(0.0 < ab[steps - 1] && ab[0] < 1.0);
        }
    }

    #[test]
    fn add_noise_limits_and_hand_value() {
        let z0 = Tensor::<f64>::full(&[2, 2, 1], 1.0);
        let eps = Tensor::<f64>::from_f64(&[2, 2, 1], &[0.3, -0.2, 0.1, 0.9]);
        assert_eq!(add_noise_at(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(add_noise_at(&z0, &eps, 0.0).unwrap(), eps);
        let zeros = Tensor::<f64>::zeros(&[2, 2, 1]);
        let half = add_noise_at(&z0, &zeros, 0.25).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ldm_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        assert_eq!(ldm_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.3);
        assert!((ldm_loss(&a, &shifted).unwrap() - 0.09).abs() < 1e-15);
        let b = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        let mut brute = 0.0;
        for i in 0..4 {
            brute += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((ldm_loss(&a, &b).unwrap() - brute / 4.0).abs() < 1e-12);
        assert!(ldm_loss(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn ddim_hand_evaluation() {
        // ab_t = 0.25, ab_prev = 0.81, sigma = 0
        let z = Tensor::<f64>::from_f64(&[2], &[1.0, -0.5]);
        let e = Tensor::<f64>::from_f64(&[2], &[0.2, 0.4]);
        let out = ddim_update(&z, &e, 0.25, 0.81, 0.0, None).unwrap();
        // z0_hat = (z - sqrt(.75) e) / .5 ; out = .9 z0_hat + sqrt(.19) e
        let s75 = 0.75f64.sqrt();
        let s19 = 0.19f64.sqrt();
        let want0 = 0.9 * (1.0 - s75 * 0.2) / 0.5 + s19 * 0.2;
        let want1 = 0.9 * (-0.5 - s75 * 0.4) / 0.5 + s19 * 0.4;
        assert!((out.data()[0] - want0).abs() < 1e-12);
        assert!((out.data()[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn ddim_inverts_noising_with_true_eps() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = Tensor::<f64>::randn(&[4, 4, 3], 0.5, &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 4, 3], 1.0, &mut rng);
        let zt = add_noise(&z0, &eps, 700, &sched).unwrap();
        let back = ddim_step(&zt, &eps, 700, None, 0.0, None, &sched).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let again = ddim_step(&zt, &eps, 700, None, 0.0, None, &sched).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn ddim_rejects_excess_sigma_and_bad_order() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let z = Tensor::<f64>::zeros(&[3]);
        let n = Tensor::<f64>::zeros(&[3]);
        let ab_prev = sched.alpha_bar(10);
        let too_big = (1.0 - ab_prev).sqrt() * 1.01;
        assert!(ddim_step(&z, &z, 20, Some(10), too_big, Some(&n), &sched).is_err());
        assert!(ddim_step(&z, &z, 20, Some(20), 0.0, None, &sched).is_err());
        assert!(ddim_step(&z, &z, 20, Some(10), 0.1, None, &sched).is_err());
    }

    #[test]
    fn ladder_is_strided_and_descending() {
        let s = NoiseSchedule::<f64>::default_linear();
        let l = s.ladder(50).unwrap();
        assert_eq!(l.len(), 50);
        assert_eq!(l[0], 999);
        assert_eq!(*l.last().unwrap(), 0);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert!(s.ladder(1001).is_err());
    }
}
