//! Probe training on cached features: fusion plus head, frozen backbone.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{Labels, TaskKind};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::fusion::{FeatureLayout, Fusion, FusionConfig, FusionOutput};
use crate::heads::{compute_loss, Head, HeadKind, LossKind, LossSpec, Targets, UperNetConfig};
use crate::metrics::{multilabel_f1, ConfusionMatrix};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{clip_grad_norm, AdamW, WarmupCosine};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{Graph, Rng, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub fusion: FusionConfig,
    pub head: HeadKind,
    pub decoder: UperNetConfig,
    pub class_weights: Option<Vec<f64>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            fusion: FusionConfig::default(),
            head: HeadKind::UperNet,
            decoder: UperNetConfig::default(),
            class_weights: None,
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            warmup_epochs: 5.0,
            weight_decay: 0.05,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine { base_lr: self.lr, warmup_epochs: self.warmup_epochs, total_epochs: self.epochs as f64 }
    }
}

/// Cached features of one split with their labels.
#[derive(Debug, Clone)]
pub struct ProbeData<T> {
    pub features: FeatureStack<T>,
    pub labels: Labels,
    pub num_classes: usize,
    pub ignore_index: Option<usize>,
    pub image_size: (usize, usize),
}

impl<T: Real> ProbeData<T> {
    pub fn new(features: FeatureStack<T>, labels: Labels, num_classes: usize, ignore_index: Option<usize>, image_size: (usize, usize)) -> Result<Self> {
        let n = features.batch_size().ok_or_else(|| Error::Empty("feature stack".into()))?;
        if n != labels.len() {
            return Err(Error::Shape(format!("{n} feature rows for {} labels", labels.len())));
        }
        if let Labels::Mask { h, w, .. } = labels {
            if (h, w) != image_size {
                return Err(Error::Shape(format!("masks {h}x{w} for images {:?}", image_size)));
            }
        }
        Ok(ProbeData { features, labels, num_classes, ignore_index, image_size })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        self.labels.task()
    }

    pub fn targets(&self, indices: &[usize]) -> Result<Targets<T>> {
        Ok(match self.labels.select(indices) {
            Labels::Class(v) => Targets::Classes(v),
            Labels::Mask { data, .. } => Targets::Masks(data),
            Labels::MultiLabel { data, labels } => {
                Targets::MultiLabel(Tensor::from_vec(&[indices.len(), labels], data.iter().map(|&b| T::of(b as f64)).collect())?)
            }
        })
    }

    /// Restrict to the samples in `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(ProbeData {
            features: self.features.select(indices)?,
            labels: self.labels.select(indices),
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
            image_size: self.image_size,
        })
    }

    /// Keep only features accepted by `keep`.
    pub fn filter(&self, keep: impl FnMut(&crate::features::FeatureKey) -> bool) -> Self {
        ProbeData { features: self.features.filter(keep), ..self.clone() }
    }
}

/// Fusion and head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub store: ParamStore<T>,
    pub fusion: Fusion,
    pub head: Head,
    pub task: TaskKind,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub loss: LossSpec,
}

impl<T: Real> Probe<T> {
    pub fn new(layout: FeatureLayout, task: TaskKind, num_classes: usize, image_size: (usize, usize), cfg: &ProbeConfig, ignore_index: Option<usize>) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, layout, &cfg.fusion, &mut rng)?;
        let head_kind = match (task, cfg.head) {
            (TaskKind::Segmentation, HeadKind::UperNet) => HeadKind::UperNet,
            (TaskKind::Segmentation, HeadKind::Linear) => return Err(Error::Config("segmentation needs the decoder head".into())),
            (_, _) => HeadKind::Linear,
        };
        let head = Head::new(&mut store, head_kind, fusion.out_channels(), num_classes, &cfg.decoder, &mut rng)?;
        let kind = if task == TaskKind::MultiLabel { LossKind::BinaryCrossEntropy } else { LossKind::CrossEntropy };
        let loss = LossSpec { kind, class_weights: cfg.class_weights.clone(), ignore_index };
        Ok(Probe { store, fusion, head, task, num_classes, image_size, loss })
    }

    pub fn forward(&self, cx: &mut Ctx<'_, T>, features: &FeatureStack<T>) -> Result<(Var, FusionOutput)> {
        let fused = self.fusion.forward(cx, features)?;
        let logits = self.head.forward(cx, &fused.pyramid, self.image_size)?;
        Ok((logits, fused))
    }

    /// Logits for every sample, in batches.
    pub fn predict(&self, features: &FeatureStack<T>, batch: usize) -> Result<Tensor<T>> {
        let n = features.batch_size().ok_or_else(|| Error::Empty("feature stack".into()))?;
        let mut parts = Vec::new();
        for start in (0..n).step_by(batch.max(1)) {
            let rows: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
            let sub = features.select(&rows)?;
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &self.store, false);
            let (logits, _) = self.forward(&mut cx, &sub)?;
            parts.push(g.value(logits).clone());
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn evaluate(&self, data: &ProbeData<T>, batch: usize) -> Result<EvalMetrics> {
        let logits = self.predict(&data.features, batch)?;
        let mut metrics = score_logits(&logits, &data.labels, data.num_classes, data.ignore_index)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let l = cx.constant(logits);
        let all: Vec<usize> = (0..data.len()).collect();
        let loss = compute_loss(&mut cx, l, &data.targets(&all)?, &self.loss)?;
        metrics.loss = g.value(loss).data()[0].f64();
        Ok(metrics)
    }
}

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub task: TaskKind,
    pub loss: f64,
    /// Top-1 (or pixel) accuracy; per-label accuracy for multi-label tasks.
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub no_valid_pixels: bool,
}

impl EvalMetrics {
    /// Model-selection score: mIoU, accuracy or micro F1 by task.
    pub fn score(&self) -> f64 {
        match self.task {
            TaskKind::Segmentation => self.miou.unwrap_or(0.0),
            TaskKind::Classification => self.accuracy,
            TaskKind::MultiLabel => self.micro_f1,
        }
    }
}

fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("logits {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for p in 0..inner {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * inner + p] > d[(b * c + best) * inner + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Metrics of raw logits against labels.
pub fn score_logits<T: Real>(logits: &Tensor<T>, labels: &Labels, classes: usize, ignore: Option<usize>) -> Result<EvalMetrics> {
    let task = labels.task();
    let mut m = EvalMetrics {
        task,
        loss: 0.0,
        accuracy: 0.0,
        micro_f1: 0.0,
        macro_f1: 0.0,
        per_class_iou: Vec::new(),
        miou: None,
        no_valid_pixels: false,
    };
    match labels {
        Labels::Class(v) | Labels::Mask { data: v, .. } => {
            let preds = argmax_channels(logits)?;
            let mut cm = ConfusionMatrix::new(classes);
            cm.add_maps(&preds, v, ignore)?;
            let iou = cm.iou();
            m.accuracy = cm.accuracy();
            m.micro_f1 = m.accuracy;
            m.macro_f1 = cm.macro_f1();
            m.per_class_iou = iou.per_class;
            m.miou = iou.miou;
            m.no_valid_pixels = iou.no_valid_pixels;
        }
        Labels::MultiLabel { data, labels: k } => {
            let probs: Vec<f64> = logits.data().iter().map(|v| 1.0 / (1.0 + libm::exp(-v.f64()))).collect();
            let f = multilabel_f1(&probs, data, *k, 0.5)?;
            m.micro_f1 = f.micro;
            m.macro_f1 = f.macro_;
            let hits = probs.iter().zip(data).filter(|(p, &t)| (**p >= 0.5) == (t == 1)).count();
            m.accuracy = if data.is_empty() { 0.0 } else { hits as f64 / data.len() as f64 };
        }
    }
    Ok(m)
}

/// Outcome of [`train_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_scores: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub step_lrs: Vec<f64>,
    pub steps_per_epoch: usize,
    /// Epoch (1-based) whose parameters were kept; 0 means initialization.
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
}

/// Train fusion and head on `train`, keeping the parameters that score
/// best on `val` (initialization included). On a non-finite loss the probe
/// is restored to the best parameters seen and an error is returned.
pub fn train_probe<T: Real>(probe: &mut Probe<T>, train: &ProbeData<T>, val: &ProbeData<T>, cfg: &ProbeConfig) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("probe split".into()));
    }
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0bad);
    let mut best_val = probe.evaluate(val, batch)?;
    let mut best_store = probe.store.clone();
    let mut best_epoch = 0;
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        val_scores: Vec::new(),
        step_lrs: Vec::new(),
        steps_per_epoch,
        best_epoch: 0,
        best_val: best_val.clone(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, rows) in order.chunks(batch).enumerate() {
            let mut rows = rows.to_vec();
            rows.sort_unstable();
            let feats = train.features.select(&rows)?;
            let targets = train.targets(&rows)?;
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &probe.store, true);
            let (logits, fused) = probe.forward(&mut cx, &feats)?;
            let mut loss = compute_loss(&mut cx, logits, &targets, &probe.loss)?;
            if let Some(aux) = fused.aux_loss {
                loss = cx.g.add(loss, aux)?;
            }
            let value = cx.g.value(loss).data()[0].f64();
            if !value.is_finite() {
                probe.store = best_store;
                return Err(Error::NonFinite(format!("probe loss at epoch {} step {step}", epoch + 1)));
            }
            let grads = cx.g.backward(loss)?;
            let mut pg = cx.param_grads(&grads);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut pg, c);
            }
            let lr = schedule.lr_at(epoch as f64 + step as f64 / steps_per_epoch as f64);
            report.step_lrs.push(lr);
            opt.step(&mut probe.store, &pg, lr);
            total += value * rows.len() as f64;
        }
        report.epoch_losses.push(total / train.len() as f64);
        let m = probe.evaluate(val, batch)?;
        report.val_scores.push(m.score());
        if m.score() > best_val.score() {
            best_val = m;
            best_store = probe.store.clone();
            best_epoch = epoch + 1;
        }
    }
    probe.store = best_store;
    report.best_epoch = best_epoch;
    report.best_val = best_val;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let cfg = ProbeConfig { epochs: 45, ..Default::default() };
        let s = cfg.schedule();
        assert!((s.lr_at(5.0) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(25.0) - 0.005).abs() < 1e-15);
        assert_eq!(s.lr_at(0.0), 0.0);
    }

    #[test]
    fn argmax_over_channels() {
        let t = Tensor::from_vec(&[1, 2, 1, 2], alloc::vec![0.0f64, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), [1, 0]);
    }
}
