//! Discrete variance schedule, closed-form forward noising and the
//! deterministic DDIM update.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Betas, alphas and cumulative alpha products for timesteps `1..=T`.
///
/// Values are kept in `f64` regardless of the tensor precision so that the
/// cumulative product is accurate at large `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both
    /// endpoints included.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Schedule("total_steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::Schedule(format!("betas must lie in (0, 1), got [{beta_start}, {beta_end}]")));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!("beta_start {beta_start} exceeds beta_end {beta_end}")));
        }
        let betas = if total_steps == 1 {
            alloc::vec![beta_start]
        } else {
            let span = (total_steps - 1) as f64;
            (0..total_steps).map(|i| beta_start + (beta_end - beta_start) * (i as f64) / span).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::Timestep { t, lo: 1, hi: self.total_steps() });
        }
        Ok(())
    }

    /// Cumulative product at `t`; `t = 0` is the clean state with value 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn forward_noise<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::of(libm::sqrt(ab)), T::of(libm::sqrt(1.0 - ab)));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Apply the DDIM update from `from` to `to` given the predicted noise.
///
/// The clean estimate is `(x - sqrt(1 - ab_from) eps) / sqrt(ab_from)` and the
/// result re-noises it to `to`.
pub fn ddim_move<T: Real>(x: &Tensor<T>, from: usize, to: usize, eps_hat: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab_from = schedule.alpha_bar(from)?;
    let ab_to = schedule.alpha_bar(to)?;
    let (s_from, n_from) = (T::of(libm::sqrt(ab_from)), T::of(libm::sqrt(1.0 - ab_from)));
    let (s_to, n_to) = (T::of(libm::sqrt(ab_to)), T::of(libm::sqrt(1.0 - ab_to)));
    x.zip_map(eps_hat, |x, e| {
        let x0 = (x - n_from * e) / s_from;
        s_to * x0 + n_to * e
    })
}

/// One denoising DDIM step from `t` down to `t_prev < t`.
pub fn ddim_step<T: Real>(
    x_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_step needs t_prev < t, got t = {t}, t_prev = {t_prev}")));
    }
    ddim_move(x_t, t, t_prev, eps_hat, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn three_step_products() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504]) {
            assert!(rel(*got, want) < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn thousand_step_product_oracle() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Independent oracle: betas from the closed form, product accumulated
        // in reverse order.
        let mut prod = 1.0f64;
        for i in (0..1000).rev() {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!(rel(s.alpha_bar(1000).unwrap(), prod) < 1e-10);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(alloc::vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn alpha_bar_zero_is_clean() {
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(11).is_err());
    }

    #[test]
    fn forward_noise_closed_forms() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let x0 = Tensor::from_vec(&[1, 1, 2, 2], alloc::vec![0.5f64, -1.0, 2.0, 0.25]).unwrap();
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        let ab = s.alpha_bar(20).unwrap();
        let out = forward_noise(&x0, 20, &zero, &s).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, libm::sqrt(ab) * x);
        }
        let out = forward_noise(&zero, 20, &x0, &s).unwrap();
        for (o, e) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, libm::sqrt(1.0 - ab) * e);
        }
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 51, &zero, &s).is_err());
        assert!(forward_noise(&x0, 1, &Tensor::zeros(&[1, 1, 2, 1]), &s).is_err());
    }

    #[test]
    fn forward_noise_at_known_alpha_bar() {
        // ab_1 = 0.64 exactly.
        let s = NoiseSchedule::from_betas(alloc::vec![0.36]).unwrap();
        let x0 = Tensor::from_vec(&[3], alloc::vec![1.0f64, -2.0, 0.5]).unwrap();
        let e = Tensor::from_vec(&[3], alloc::vec![0.3f64, 0.7, -1.1]).unwrap();
        let out = forward_noise(&x0, 1, &e, &s).unwrap();
        for ((o, x), e) in out.data().iter().zip(x0.data()).zip(e.data()) {
            assert!((o - (0.8 * x + 0.6 * e)).abs() < 1e-15);
        }
    }

    #[test]
    fn ddim_scalar_example() {
        // ab_1 = 0.81, ab_2 = 0.25.
        let s = NoiseSchedule::from_betas(alloc::vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert!(rel(s.alpha_bar(2).unwrap(), 0.25) < 1e-12);
        let x = Tensor::from_vec(&[1], alloc::vec![1.0f64]).unwrap();
        let e = Tensor::from_vec(&[1], alloc::vec![0.5f64]).unwrap();
        let out = ddim_step(&x, 2, 1, &e, &s).unwrap();
        let x0 = (1.0 - libm::sqrt(0.75) * 0.5) / 0.5;
        let want = 0.9 * x0 + libm::sqrt(0.19) * 0.5;
        assert!(rel(out.data()[0], want) < 1e-12);
    }

    #[test]
    fn ddim_zero_prediction_and_terminal_step() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x = Tensor::from_vec(&[2], alloc::vec![0.7f64, -0.2]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let out = ddim_step(&x, 60, 40, &zero, &s).unwrap();
        let k = libm::sqrt(s.alpha_bar(40).unwrap() / s.alpha_bar(60).unwrap());
        for (o, x) in out.data().iter().zip(x.data()) {
            assert!(rel(*o, k * x) < 1e-14);
        }
        let e = Tensor::from_vec(&[2], alloc::vec![0.1f64, 0.4]).unwrap();
        let out = ddim_step(&x, 60, 0, &e, &s).unwrap();
        let ab = s.alpha_bar(60).unwrap();
        for ((o, x), e) in out.data().iter().zip(x.data()).zip(e.data()) {
            assert!(rel(*o, (x - libm::sqrt(1.0 - ab) * e) / libm::sqrt(ab)) < 1e-14);
        }
        assert!(ddim_step(&x, 40, 40, &e, &s).is_err());
        assert!(ddim_step(&x, 101, 40, &e, &s).is_err());
    }
}
