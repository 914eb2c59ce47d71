//! Probe decoders on top of a fused pyramid, plus their losses.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, Linear, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{Rng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    UperNet,
}

impl core::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "upernet" | "seg" => Ok(HeadKind::UperNet),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UperNetConfig {
    pub fpn_channels: usize,
    pub ppm_bins: Vec<usize>,
}

impl Default for UperNetConfig {
    fn default() -> Self {
        UperNetConfig { fpn_channels: 128, ppm_bins: alloc::vec![1, 2, 3, 6] }
    }
}

fn check_pyramid<T: Real>(cx: &Ctx<'_, T>, pyramid: &[Var], channels: &[usize]) -> Result<()> {
    if pyramid.is_empty() {
        return Err(Error::Empty("pyramid".into()));
    }
    if pyramid.len() != channels.len() {
        return Err(Error::Shape(format!("pyramid has {} levels, head expects {}", pyramid.len(), channels.len())));
    }
    for (i, (&p, &c)) in pyramid.iter().zip(channels).enumerate() {
        let s = cx.g.shape(p);
        if s.len() != 4 || s[1] != c {
            return Err(Error::Shape(format!("pyramid level {i} is {s:?}, head expects {c} channels")));
        }
    }
    Ok(())
}

/// Global average pooling per level, concatenation, one affine map.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub fc: Linear,
    pub in_channels: Vec<usize>,
    pub num_classes: usize,
}

impl LinearHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_channels: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if num_classes == 0 || in_channels.is_empty() {
            return Err(Error::Config("linear head needs classes and at least one level".into()));
        }
        let fc = Linear::new(store, "head.linear", in_channels.iter().sum(), num_classes, true, rng);
        Ok(LinearHead { fc, in_channels: in_channels.to_vec(), num_classes })
    }

    /// Pooled feature vector `(B, sum C)`.
    pub fn pool<T: Real>(&self, cx: &mut Ctx<'_, T>, pyramid: &[Var]) -> Result<Var> {
        check_pyramid(cx, pyramid, &self.in_channels)?;
        let pooled: Vec<Var> = pyramid.iter().map(|&p| cx.g.spatial_mean(p)).collect::<Result<_>>()?;
        cx.g.concat(&pooled, 1)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, pyramid: &[Var]) -> Result<Var> {
        let v = self.pool(cx, pyramid)?;
        self.fc.forward(cx, v)
    }
}

/// Convolution, group norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut Rng) -> Self {
        ConvNormAct {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, 1, kernel / 2, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        let h = self.norm.forward(cx, h)?;
        Ok(cx.g.relu(h))
    }
}

/// Pyramid pooling on the coarsest level, top-down lateral path, fusion of
/// all levels at the finest resolution, classifier, upsample to the image.
#[derive(Debug, Clone)]
pub struct UperNet {
    pub in_channels: Vec<usize>,
    pub num_classes: usize,
    pub config: UperNetConfig,
    ppm: Vec<ConvNormAct>,
    bottleneck: ConvNormAct,
    laterals: Vec<ConvNormAct>,
    fpn: Vec<ConvNormAct>,
    fuse: ConvNormAct,
    classifier: Conv2d,
}

impl UperNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        in_channels: &[usize],
        num_classes: usize,
        config: UperNetConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes == 0 || in_channels.is_empty() || config.fpn_channels == 0 || config.ppm_bins.contains(&0) {
            return Err(Error::Config(format!("invalid decoder setup {config:?} over {in_channels:?}")));
        }
        let f = config.fpn_channels;
        let top = *in_channels.last().expect("nonempty");
        let ppm = config.ppm_bins.iter().map(|b| ConvNormAct::new(store, &format!("head.ppm{b}"), top, f, 1, rng)).collect();
        let bottleneck = ConvNormAct::new(store, "head.bottleneck", top + f * config.ppm_bins.len(), f, 3, rng);
        let n = in_channels.len();
        let laterals = (0..n - 1).map(|i| ConvNormAct::new(store, &format!("head.lateral{i}"), in_channels[i], f, 1, rng)).collect();
        let fpn = (0..n - 1).map(|i| ConvNormAct::new(store, &format!("head.fpn{i}"), f, f, 3, rng)).collect();
        let fuse = ConvNormAct::new(store, "head.fuse", n * f, f, 3, rng);
        let classifier = Conv2d::pointwise(store, "head.classifier", f, num_classes, rng);
        Ok(UperNet { in_channels: in_channels.to_vec(), num_classes, config, ppm, bottleneck, laterals, fpn, fuse, classifier })
    }

    /// Logits `(B, classes, image_h, image_w)`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, pyramid: &[Var], image_size: (usize, usize)) -> Result<Var> {
        check_pyramid(cx, pyramid, &self.in_channels)?;
        let n = pyramid.len();
        let size = |cx: &Ctx<'_, T>, v: Var| {
            let s = cx.g.shape(v);
            (s[2], s[3])
        };
        let top = pyramid[n - 1];
        let (th, tw) = size(cx, top);
        let mut parts = alloc::vec![top];
        for (bin, layer) in self.config.ppm_bins.iter().zip(&self.ppm) {
            let p = cx.g.adaptive_avg_pool(top, *bin, *bin)?;
            let p = layer.forward(cx, p)?;
            parts.push(cx.g.resize_bilinear(p, th, tw)?);
        }
        let cat = cx.g.concat(&parts, 1)?;
        let mut lat: Vec<Var> = Vec::with_capacity(n);
        for (i, l) in self.laterals.iter().enumerate() {
            lat.push(l.forward(cx, pyramid[i])?);
        }
        lat.push(self.bottleneck.forward(cx, cat)?);
        for i in (0..n - 1).rev() {
            let (h, w) = size(cx, lat[i]);
            let up = cx.g.resize_bilinear(lat[i + 1], h, w)?;
            lat[i] = cx.g.add(lat[i], up)?;
        }
        let (fh, fw) = size(cx, lat[0]);
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let o = if i + 1 < n { self.fpn[i].forward(cx, lat[i])? } else { lat[i] };
            outs.push(cx.g.resize_bilinear(o, fh, fw)?);
        }
        let cat = cx.g.concat(&outs, 1)?;
        let fused = self.fuse.forward(cx, cat)?;
        let logits = self.classifier.forward(cx, fused)?;
        cx.g.resize_bilinear(logits, image_size.0, image_size.1)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Linear(LinearHead),
    UperNet(UperNet),
}

impl Head {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        kind: HeadKind,
        in_channels: &[usize],
        num_classes: usize,
        seg: &UperNetConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Linear => Head::Linear(LinearHead::new(store, in_channels, num_classes, rng)?),
            HeadKind::UperNet => Head::UperNet(UperNet::new(store, in_channels, num_classes, seg.clone(), rng)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::UperNet(_) => HeadKind::UperNet,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, pyramid: &[Var], image_size: (usize, usize)) -> Result<Var> {
        match self {
            Head::Linear(h) => h.forward(cx, pyramid),
            Head::UperNet(h) => h.forward(cx, pyramid, image_size),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub class_weights: Option<Vec<f64>>,
    pub ignore_index: Option<usize>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec { kind: LossKind::CrossEntropy, class_weights: None, ignore_index: None }
    }

    pub fn binary() -> Self {
        LossSpec { kind: LossKind::BinaryCrossEntropy, class_weights: None, ignore_index: None }
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// One class per sample.
    Classes(Vec<usize>),
    /// Row-major class map per sample, flattened over the batch.
    Masks(Vec<usize>),
    /// `(B, labels)` with entries in `{0, 1}`.
    MultiLabel(Tensor<T>),
}

/// Mean-reduced loss of `logits` against `targets`.
pub fn compute_loss<T: Real>(cx: &mut Ctx<'_, T>, logits: Var, targets: &Targets<T>, spec: &LossSpec) -> Result<Var> {
    match (spec.kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(t) | Targets::Masks(t)) => {
            let t: Vec<Option<usize>> = t.iter().map(|&c| (Some(c) != spec.ignore_index).then_some(c)).collect();
            let w: Option<Vec<T>> = spec.class_weights.as_ref().map(|w| w.iter().map(|&v| T::of(v)).collect());
            cx.g.cross_entropy(logits, &t, w.as_deref())
        }
        (LossKind::BinaryCrossEntropy, Targets::MultiLabel(t)) => {
            if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Label("multi-label targets must be 0 or 1".into()));
            }
            cx.g.bce_with_logits(logits, t)
        }
        _ => Err(Error::Config("loss kind does not match the target type".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn ce(logits: &[f64], target: usize) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let l = cx.constant(Tensor::from_vec(&[1, logits.len()], logits.to_vec()).unwrap());
        let loss = compute_loss(&mut cx, l, &Targets::Classes(alloc::vec![target]), &LossSpec::cross_entropy()).unwrap();
        g.value(loss).data()[0]
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce(&[0.0, 0.0], 0) - core::f64::consts::LN_2).abs() < 1e-12);
        let hand = -libm::log(libm::exp(3.0) / (libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0)));
        assert!((ce(&[1.0, 2.0, 3.0], 2) - hand).abs() < 1e-12);
        assert!((hand - 0.4076).abs() < 1e-4);
        let mut prev = f64::INFINITY;
        for m in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let l = ce(&[m, 0.0], 0);
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let l = cx.constant(Tensor::zeros(&[1, 2]));
        assert!(compute_loss(&mut cx, l, &Targets::Classes(alloc::vec![2]), &LossSpec::cross_entropy()).is_err());
        assert!(compute_loss(&mut cx, l, &Targets::Classes(alloc::vec![0]), &LossSpec::binary()).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let l = cx.constant(Tensor::from_vec(&[1, 2, 1, 2], alloc::vec![0.0, 5.0, 0.0, -5.0]).unwrap());
        let spec = LossSpec { ignore_index: Some(255), ..LossSpec::cross_entropy() };
        let loss = compute_loss(&mut cx, l, &Targets::Masks(alloc::vec![0, 255]), &spec).unwrap();
        assert!((g.value(loss).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn decoder_output_matches_image_size() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng(1);
        let cfg = UperNetConfig { fpn_channels: 4, ppm_bins: alloc::vec![1, 2, 3, 6] };
        let head = UperNet::new(&mut store, &[3, 5, 2], 1, cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let p: Vec<Var> = [(3, 8), (5, 4), (2, 2)]
            .iter()
            .map(|&(c, s)| cx.constant(Tensor::from_fn(&[2, c, s, s], |i| (i as f64).cos())))
            .collect();
        let out = head.forward(&mut cx, &p, (16, 16)).unwrap();
        assert_eq!(cx.g.shape(out), &[2, 1, 16, 16]);
        assert!(head.forward(&mut cx, &p[..2], (16, 16)).is_err());
    }
}
