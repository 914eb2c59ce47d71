//! Extraction plans, the captured feature stack and the extraction driver.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::diffusion::{check_targets, ddim_invert, ConditioningContext, Denoiser, LatentCodec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::taps::{Half, ModuleKind, TapPoint, TapRequest};
use crate::tensor::Tensor;

/// Which network halves a plan draws blocks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfSelection {
    Decoder,
    Encoder,
    Both,
}

impl HalfSelection {
    fn admits(self, h: Half) -> bool {
        matches!(
            (self, h),
            (HalfSelection::Decoder, Half::Decoder) | (HalfSelection::Encoder, Half::Encoder) | (HalfSelection::Both, Half::Encoder | Half::Decoder)
        )
    }
}

impl FromStr for HalfSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "decoder" | "dec" => Ok(HalfSelection::Decoder),
            "encoder" | "enc" => Ok(HalfSelection::Encoder),
            "both" => Ok(HalfSelection::Both),
            _ => Err(Error::Config(format!("unknown half selection {s:?}"))),
        }
    }
}

/// A module kind, optionally pinned to one block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selector {
    pub kind: ModuleKind,
    pub block: Option<usize>,
}

impl Selector {
    pub fn all(kind: ModuleKind) -> Self {
        Selector { kind, block: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionPlan {
    pub timesteps: Vec<usize>,
    pub selectors: Vec<Selector>,
    pub scales: Vec<usize>,
    pub half: HalfSelection,
    /// Bottleneck taps, reported at the coarsest scale.
    pub include_mid: bool,
    /// Spacing of the visited timesteps during inversion.
    pub inversion_stride: usize,
}

/// Timesteps 1, 100 and 200; ResNet and self-attention outputs of every
/// decoder block at all four scales.
pub fn default_plan() -> ExtractionPlan {
    ExtractionPlan {
        timesteps: alloc::vec![1, 100, 200],
        selectors: alloc::vec![Selector::all(ModuleKind::ResNet), Selector::all(ModuleKind::SelfAttention)],
        scales: alloc::vec![1, 2, 3, 4],
        half: HalfSelection::Decoder,
        include_mid: false,
        inversion_stride: 1,
    }
}

impl ExtractionPlan {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        check_targets(&self.timesteps, total_steps)?;
        if self.selectors.is_empty() {
            return Err(Error::Config("plan selects no module kinds".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("plan selects no scales".into()));
        }
        if self.inversion_stride == 0 {
            return Err(Error::Config("inversion stride must be positive".into()));
        }
        Ok(())
    }

    /// Tap points of `available` picked by this plan, sorted. Every selector
    /// must match at least one point and every selected scale must be covered.
    pub fn resolve(&self, available: &[TapPoint]) -> Result<Vec<TapPoint>> {
        let mut picked: Vec<TapPoint> = Vec::new();
        for sel in &self.selectors {
            let before = picked.len();
            for p in available {
                let half_ok = self.half.admits(p.half) || (self.include_mid && p.half == Half::Mid);
                if half_ok
                    && p.kind == sel.kind
                    && self.scales.contains(&p.scale)
                    && sel.block.is_none_or(|b| b == p.block)
                    && !picked.contains(p)
                {
                    picked.push(*p);
                }
            }
            if picked.len() == before {
                return Err(Error::Tap(format!(
                    "selector {:?}{} matches no block of the backbone",
                    sel.kind,
                    sel.block.map(|b| format!(" block {b}")).unwrap_or_default()
                )));
            }
        }
        for s in &self.scales {
            if !picked.iter().any(|p| p.scale == *s) {
                return Err(Error::Tap(format!("no selected block at scale {s}")));
            }
        }
        picked.sort();
        Ok(picked)
    }
}

/// Address of one captured tensor. The derived order (scale, then
/// timestep, block and kind) is the canonical enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureKey {
    pub scale: usize,
    pub timestep: usize,
    pub block: usize,
    pub kind: ModuleKind,
}

impl FeatureKey {
    /// The `(block, kind)` part, shared across timesteps.
    pub fn module(&self) -> (usize, ModuleKind) {
        (self.block, self.kind)
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}_s{}_l{}_{}", self.timestep, self.scale, self.block, self.kind)
    }
}

impl FromStr for FeatureKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed feature key {s:?}"));
        let parts: Vec<&str> = s.split('_').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |p: &str, prefix: char| p.strip_prefix(prefix).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        Ok(FeatureKey {
            timestep: num(parts[0], 't')?,
            scale: num(parts[1], 's')?,
            block: num(parts[2], 'l')?,
            kind: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Captured features, each `(B, d, h_s, w_s)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStack<T> {
    entries: BTreeMap<FeatureKey, Tensor<T>>,
}

impl<T: Real> FeatureStack<T> {
    pub fn new() -> Self {
        FeatureStack { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: FeatureKey, value: Tensor<T>) -> Result<()> {
        value.dims4()?;
        if let Some(b) = self.batch_size() {
            if value.shape()[0] != b {
                return Err(Error::Shape(format!("{key} has batch {}, stack has {b}", value.shape()[0])));
            }
        }
        if let Some((k, v)) = self.entries.iter().find(|(k, _)| k.scale == key.scale) {
            if v.shape()[2..] != value.shape()[2..] {
                return Err(Error::Shape(format!("{key} spatial {:?} differs from {k} {:?}", &value.shape()[2..], &v.shape()[2..])));
            }
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&Tensor<T>> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureKey, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FeatureKey> {
        self.entries.keys()
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.entries.values().next().map(|t| t.shape()[0])
    }

    pub fn scales(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.keys().map(|k| k.scale).collect();
        s.dedup();
        s
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.entries.keys().map(|k| k.timestep).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Per scale, entries ordered timestep-major, then block, then kind.
    pub fn group_by_scale(&self) -> BTreeMap<usize, Vec<(FeatureKey, &Tensor<T>)>> {
        let mut out: BTreeMap<usize, Vec<(FeatureKey, &Tensor<T>)>> = BTreeMap::new();
        for (k, v) in &self.entries {
            out.entry(k.scale).or_default().push((*k, v));
        }
        out
    }

    /// Keep only entries accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&FeatureKey) -> bool) -> Self {
        FeatureStack { entries: self.entries.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (*k, v.clone())).collect() }
    }

    /// Rows `indices` of every entry.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in &self.entries {
            entries.insert(*k, v.select_rows(indices)?);
        }
        Ok(FeatureStack { entries })
    }

    /// Concatenate stacks with identical keys along the batch axis.
    pub fn concat_batches(parts: &[FeatureStack<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("no stacks to concatenate".into()))?;
        let mut entries = BTreeMap::new();
        for k in first.entries.keys() {
            let ts: Vec<&Tensor<T>> = parts
                .iter()
                .map(|p| p.entries.get(k).ok_or_else(|| Error::Shape(format!("stack is missing {k}"))))
                .collect::<Result<_>>()?;
            entries.insert(*k, Tensor::concat(&ts, 0)?);
        }
        if parts.iter().any(|p| p.len() != first.len()) {
            return Err(Error::Shape("stacks have different key sets".into()));
        }
        Ok(FeatureStack { entries })
    }

    pub fn cast<U: Real>(&self) -> FeatureStack<U> {
        FeatureStack { entries: self.entries.iter().map(|(k, v)| (*k, v.cast())).collect() }
    }
}

/// `(B, h*w, d)` tokens to a `(B, d, h, w)` grid; token `k` lands on pixel
/// `(k / w, k % w)`.
pub fn attention_to_grid<T: Real>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Shape(format!("{s:?} tokens do not fill a {h}x{w} grid")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let src = tokens.data();
    let mut out = alloc::vec![T::zero(); tokens.numel()];
    for bi in 0..b {
        for k in 0..n {
            for c in 0..d {
                out[(bi * d + c) * n + k] = src[(bi * n + k) * d + c];
            }
        }
    }
    Tensor::from_vec(&[b, d, h, w], out)
}

/// Inverse of [`attention_to_grid`].
pub fn grid_to_tokens<T: Real>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d, h, w) = grid.dims4()?;
    let n = h * w;
    let src = grid.data();
    let mut out = alloc::vec![T::zero(); grid.numel()];
    for bi in 0..b {
        for c in 0..d {
            for k in 0..n {
                out[(bi * n + k) * d + c] = src[(bi * d + c) * n + k];
            }
        }
    }
    Tensor::from_vec(&[b, n, d], out)
}

/// Everything needed to turn images into features.
pub struct Backbone<'a, T, D: ?Sized> {
    pub denoiser: &'a D,
    pub codec: &'a LatentCodec<T>,
    pub schedule: &'a NoiseSchedule,
    pub context: &'a ConditioningContext<T>,
}

/// Encode `images` (`(B, C, H, W)` in `[0, 1]`), invert once to the largest
/// planned timestep, then evaluate the denoiser with taps at every planned
/// timestep. Attention outputs are reshaped to grids.
pub fn extract<T: Real, D: Denoiser<T> + ?Sized>(
    images: &Tensor<T>,
    plan: &ExtractionPlan,
    backbone: &Backbone<'_, T, D>,
) -> Result<FeatureStack<T>> {
    plan.validate(backbone.schedule.total_steps())?;
    let points = plan.resolve(&backbone.denoiser.tap_points())?;
    let latents = backbone.codec.encode(images)?;
    let (c0, h0, w0) = backbone.denoiser.latent_geometry();
    if latents.shape()[1..] != [c0, h0, w0] {
        return Err(Error::Shape(format!("codec produced {:?}, backbone expects {:?}", &latents.shape()[1..], [c0, h0, w0])));
    }
    let noisy = ddim_invert(&latents, &plan.timesteps, backbone.schedule, backbone.denoiser, backbone.context, plan.inversion_stride)?;
    let request = TapRequest::of(points.iter().copied());
    let mut stack = FeatureStack::new();
    for (&t, x_t) in &noisy {
        let (_, caps) = backbone.denoiser.predict(x_t, t, backbone.context, &request)?;
        for p in &points {
            let raw = caps.get(p).ok_or_else(|| Error::Tap(format!("backbone did not return {p}")))?;
            let f = scale_factor(p.scale);
            let (h, w) = (h0 / f, w0 / f);
            let grid = match p.kind {
                ModuleKind::ResNet => raw.clone(),
                _ => attention_to_grid(raw, h, w)?,
            };
            let key = FeatureKey { scale: p.scale, timestep: t, block: p.block, kind: p.kind };
            if grid.shape()[2..] != [h, w] {
                return Err(Error::Shape(format!("{key} has spatial {:?}, expected {h}x{w}", &grid.shape()[2..])));
            }
            if !grid.is_finite() {
                return Err(Error::NonFinite(format!("feature {key}")));
            }
            stack.insert(key, grid)?;
        }
    }
    Ok(stack)
}

/// [`extract`] over chunks of at most `batch` images.
pub fn extract_batched<T: Real, D: Denoiser<T> + ?Sized>(
    images: &Tensor<T>,
    plan: &ExtractionPlan,
    backbone: &Backbone<'_, T, D>,
    batch: usize,
) -> Result<FeatureStack<T>> {
    let n = images.dims4()?.0;
    if n == 0 {
        return Err(Error::Empty("image batch".into()));
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        let rows: Vec<usize> = (start..(start + batch.max(1)).min(n)).collect();
        parts.push(extract(&images.select_rows(&rows)?, plan, backbone)?);
    }
    FeatureStack::concat_batches(&parts)
}

fn scale_factor(scale: usize) -> usize {
    1 << (scale - 1)
}
