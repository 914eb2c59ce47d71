//! Deterministic inversion of a clean latent along the DDIM path and the
//! matching reverse walk.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::schedule::{ddim_move, NoiseSchedule};
use super::{ConditioningContext, Denoiser};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::taps::TapRequest;
use crate::tensor::Tensor;

/// Check that `targets` is nonempty, strictly ascending and inside `[1, T]`.
pub fn check_targets(targets: &[usize], total: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Empty("target timesteps".into()));
    }
    if let Some(w) = targets.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("timesteps must be strictly ascending, found {} then {}", w[0], w[1])));
    }
    for &t in targets {
        if t == 0 || t > total {
            return Err(Error::Timestep { t, lo: 1, hi: total });
        }
    }
    Ok(())
}

/// Timesteps visited when inverting up to the largest target: every
/// multiple of `stride` below it, plus every target.
pub fn inversion_path(targets: &[usize], stride: usize, total: usize) -> Result<Vec<usize>> {
    check_targets(targets, total)?;
    if stride == 0 {
        return Err(Error::Config("inversion stride must be positive".into()));
    }
    let last = *targets.last().expect("nonempty");
    let mut path: Vec<usize> = (1..=last / stride).map(|k| k * stride).collect();
    path.extend_from_slice(targets);
    path.sort_unstable();
    path.dedup();
    Ok(path)
}

/// Walk the DDIM update from `t = 0` upward. Each move to the next visited
/// timestep `t` uses the noise predicted from the current (less noisy) state
/// conditioned on `t`. Returns the state at every requested target.
pub fn ddim_invert<T: Real, D: Denoiser<T> + ?Sized>(
    x0: &Tensor<T>,
    targets: &[usize],
    schedule: &NoiseSchedule,
    denoiser: &D,
    context: &ConditioningContext<T>,
    stride: usize,
) -> Result<BTreeMap<usize, Tensor<T>>> {
    let path = inversion_path(targets, stride, schedule.total_steps())?;
    let none = TapRequest::none();
    let mut out = BTreeMap::new();
    let mut x = x0.clone();
    let mut prev = 0;
    for t in path {
        let (eps, _) = denoiser.predict(&x, t, context, &none)?;
        x = ddim_move(&x, prev, t, &eps, schedule)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("inverted latent at t = {t}")));
        }
        if targets.binary_search(&t).is_ok() {
            out.insert(t, x.clone());
        }
        prev = t;
    }
    Ok(out)
}

/// Denoise `x_t` back to `t = 0` along the same visited timesteps the
/// inversion used.
pub fn ddim_reconstruct<T: Real, D: Denoiser<T> + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    denoiser: &D,
    context: &ConditioningContext<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let mut path = inversion_path(&[t], stride, schedule.total_steps())?;
    path.insert(0, 0);
    let none = TapRequest::none();
    let mut x = x_t.clone();
    for w in path.windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let (eps, _) = denoiser.predict(&x, hi, context, &none)?;
        x = ddim_move(&x, hi, lo, &eps, schedule)?;
    }
    Ok(x)
}
