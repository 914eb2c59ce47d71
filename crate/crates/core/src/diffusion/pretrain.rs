//! Noise-prediction training of the toy backbone.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::NoiseSchedule;
use super::unet::{ConditioningContext, ToyUNet};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::optim::{clip_grad_norm, AdamW, WarmupCosine};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, batch_size: 16, lr: 2e-3, weight_decay: 0.0, grad_clip: 1.0, warmup_steps: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }
}

/// Minimise `||eps - eps_hat(x_t, t)||^2` with `t` uniform on `[1, T]`.
/// `latents` is the encoded training set `(N, C0, H0, W0)`. The network is
/// frozen on return.
pub fn pretrain_denoiser<T: Real>(
    net: &mut ToyUNet<T>,
    latents: &Tensor<T>,
    schedule: &NoiseSchedule,
    context: &ConditioningContext<T>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let (n, c, h, w) = latents.dims4()?;
    if n == 0 {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let per = c * h * w;
    let total = schedule.total_steps();
    let mut rng = crate::rng(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let sched = WarmupCosine { base_lr: cfg.lr, warmup_epochs: cfg.warmup_steps as f64, total_epochs: cfg.steps as f64 };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let mut x_t = Vec::with_capacity(b * per);
        let mut eps = Vec::with_capacity(b * per);
        let mut ts = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..n);
            let t = rng.random_range(1..=total);
            let ab = schedule.alpha_bar(t)?;
            let (sa, sn) = (T::of(libm::sqrt(ab)), T::of(libm::sqrt(1.0 - ab)));
            for &x0 in &latents.data()[i * per..(i + 1) * per] {
                let e = T::of(StandardNormal.sample(&mut rng));
                eps.push(e);
                x_t.push(sa * x0 + sn * e);
            }
            ts.push(t);
        }
        let x_t = Tensor::from_vec(&[b, c, h, w], x_t)?;
        let eps = Tensor::from_vec(&[b, c, h, w], eps)?;

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &net.store, true);
        let xv = cx.constant(x_t);
        let target = cx.constant(eps);
        let pred = net.forward_train(&mut cx, xv, &ts, context)?;
        let loss = cx.g.mse(pred, target)?;
        let l = cx.g.value(loss).data()[0].f64();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step} (timesteps {ts:?})")));
        }
        let grads = cx.g.backward(loss)?;
        let mut pg = cx.param_grads(&grads);
        drop(cx);
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut pg, cfg.grad_clip);
        }
        opt.step(&mut net.store, &pg, sched.lr_at(step as f64 + 1.0));
        losses.push(l);
    }
    net.store.freeze();
    Ok(PretrainReport { losses })
}
