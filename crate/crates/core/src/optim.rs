//! AdamW with decoupled weight decay and the warmup + cosine learning-rate
//! schedule used for probe training.

use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.steps += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let t = self.steps as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (id, g) in grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                (alloc::vec![T::zero(); g.numel()], alloc::vec![T::zero(); g.numel()])
            });
            let p = store.get_mut(*id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p *= decay;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>();
    let norm = libm::sqrt(norm);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over `warmup_epochs`, then cosine decay
/// to 0 at `total_epochs`. Epochs are fractional so the schedule can be
/// evaluated per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl WarmupCosine {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * epoch / self.warmup_epochs;
        }
        let horizon = self.total_epochs - self.warmup_epochs;
        if horizon <= 0.0 {
            return self.base_lr;
        }
        let progress = ((epoch - self.warmup_epochs) / horizon).clamp(0.0, 1.0);
        0.5 * self.base_lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}
