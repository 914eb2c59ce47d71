//! In-memory datasets, band handling, augmentation, label subsampling and
//! the synthetic shape benchmarks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    Classification,
    MultiLabel,
    Segmentation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::MultiLabel => "multilabel",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "class" => Ok(TaskKind::Classification),
            "multilabel" | "multi-label" | "multi_label" => Ok(TaskKind::MultiLabel),
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    Class(Vec<usize>),
    /// Row-major maps, `h * w` entries per sample.
    Mask { data: Vec<usize>, h: usize, w: usize },
    /// `labels` bits per sample.
    MultiLabel { data: Vec<u8>, labels: usize },
}

impl Labels {
    pub fn task(&self) -> TaskKind {
        match self {
            Labels::Class(_) => TaskKind::Classification,
            Labels::Mask { .. } => TaskKind::Segmentation,
            Labels::MultiLabel { .. } => TaskKind::MultiLabel,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Mask { data, h, w } => data.len() / (h * w).max(1),
            Labels::MultiLabel { data, labels } => data.len() / (*labels).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
            Labels::Mask { data, h, w } => {
                let n = h * w;
                Labels::Mask { data: indices.iter().flat_map(|&i| data[i * n..(i + 1) * n].iter().copied()).collect(), h: *h, w: *w }
            }
            Labels::MultiLabel { data, labels } => Labels::MultiLabel {
                data: indices.iter().flat_map(|&i| data[i * labels..(i + 1) * labels].iter().copied()).collect(),
                labels: *labels,
            },
        }
    }
}

/// Images `(N, C, H, W)` in `[0, 1]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Labels,
    pub bands: Vec<String>,
    pub num_classes: usize,
    pub ignore_index: Option<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Labels, bands: Vec<String>, num_classes: usize, ignore_index: Option<usize>) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        if bands.len() != c {
            return Err(Error::Shape(format!("{c} channels but {} band names", bands.len())));
        }
        match &labels {
            Labels::Class(v) => {
                if let Some(bad) = v.iter().find(|&&l| l >= num_classes) {
                    return Err(Error::Label(format!("class {bad} outside [0, {num_classes})")));
                }
            }
            Labels::Mask { data, h: mh, w: mw } => {
                if (*mh, *mw) != (h, w) {
                    return Err(Error::Shape(format!("masks {mh}x{mw} for images {h}x{w}")));
                }
                if let Some(bad) = data.iter().find(|&&l| l >= num_classes && Some(l) != ignore_index) {
                    return Err(Error::Label(format!("mask value {bad} outside [0, {num_classes})")));
                }
            }
            Labels::MultiLabel { data, labels: k } => {
                if *k != num_classes || data.iter().any(|&b| b > 1) {
                    return Err(Error::Label("multi-label vectors must be 0/1 of length num_classes".into()));
                }
            }
        }
        Ok(Dataset { images, labels, bands, num_classes, ignore_index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn task(&self) -> TaskKind {
        self.labels.task()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: self.labels.select(indices),
            bands: self.bands.clone(),
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
        })
    }

    /// One stratum per sample: the class, the most frequent non-background
    /// mask class, or the first active label.
    pub fn strata(&self) -> Vec<usize> {
        match &self.labels {
            Labels::Class(v) => v.clone(),
            Labels::Mask { data, h, w } => data
                .chunks(h * w)
                .map(|m| {
                    let mut counts = alloc::vec![0usize; self.num_classes];
                    for &c in m.iter().filter(|&&c| c < self.num_classes) {
                        counts[c] += 1;
                    }
                    (1..self.num_classes).filter(|&c| counts[c] > 0).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap_or(0)
                })
                .collect(),
            Labels::MultiLabel { data, labels } => {
                data.chunks(*labels).map(|v| v.iter().position(|&b| b == 1).unwrap_or(*labels)).collect()
            }
        }
    }
}

/// Per-band extremes over a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BandStats {
    pub fn compute<T: Real>(images: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if n * h * w == 0 {
            return Err(Error::Empty("band statistics over no pixels".into()));
        }
        let mut min = alloc::vec![f64::INFINITY; c];
        let mut max = alloc::vec![f64::NEG_INFINITY; c];
        for (i, plane) in images.data().chunks(h * w).enumerate() {
            let b = i % c;
            for v in plane {
                min[b] = min[b].min(v.f64());
                max[b] = max[b].max(v.f64());
            }
        }
        Ok(BandStats { min, max })
    }
}

fn check_stats(c: usize, stats: &BandStats) -> Result<()> {
    if stats.min.len() < c || stats.max.len() < c {
        return Err(Error::Config(format!("statistics cover {} bands, images have {c}", stats.min.len().min(stats.max.len()))));
    }
    Ok(())
}

/// `(x - min) / (max - min)` per band; constant bands map to 0.
pub fn normalize_bands<T: Real>(images: &Tensor<T>, stats: &BandStats) -> Result<Tensor<T>> {
    let (_, c, h, w) = images.dims4()?;
    check_stats(c, stats)?;
    let mut out = images.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = i % c;
        let span = stats.max[b] - stats.min[b];
        for v in plane {
            *v = if span > 0.0 { T::of((v.f64() - stats.min[b]) / span) } else { T::zero() };
        }
    }
    Ok(out)
}

pub fn denormalize_bands<T: Real>(images: &Tensor<T>, stats: &BandStats) -> Result<Tensor<T>> {
    let (_, c, h, w) = images.dims4()?;
    check_stats(c, stats)?;
    let mut out = images.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = i % c;
        for v in plane {
            *v = T::of(v.f64() * (stats.max[b] - stats.min[b]) + stats.min[b]);
        }
    }
    Ok(out)
}

/// Reorder bands to `required`, zero-filling the ones `present` lacks.
pub fn match_bands<T: Real>(images: &Tensor<T>, present: &[String], required: &[String]) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.dims4()?;
    if required.is_empty() {
        return Err(Error::Config("required band list is empty".into()));
    }
    if present.len() != c {
        return Err(Error::Shape(format!("{c} channels but {} band names", present.len())));
    }
    let hw = h * w;
    let mut out = alloc::vec![T::zero(); n * required.len() * hw];
    for (j, name) in required.iter().enumerate() {
        let Some(src) = present.iter().position(|p| p == name) else { continue };
        for b in 0..n {
            let from = (b * c + src) * hw;
            let to = (b * required.len() + j) * hw;
            out[to..to + hw].copy_from_slice(&images.data()[from..from + hw]);
        }
    }
    Tensor::from_vec(&[n, required.len(), h, w], out)
}

/// Random draws for one sample's augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraws {
    pub hflip: bool,
    pub vflip: bool,
    /// Brightness, contrast and saturation factors.
    pub jitter: Option<[f64; 3]>,
}

pub const JITTER_RANGE: f64 = 0.2;

impl AugmentDraws {
    pub fn none() -> Self {
        AugmentDraws { hflip: false, vflip: false, jitter: None }
    }

    /// Each transform independently with probability 0.5.
    pub fn sample(rng: &mut Rng) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let jitter = rng.random_bool(0.5).then(|| {
            let mut f = || 1.0 + rng.random_range(-JITTER_RANGE..=JITTER_RANGE);
            [f(), f(), f()]
        });
        AugmentDraws { hflip, vflip, jitter }
    }
}

pub fn flip_horizontal<X: Copy>(plane: &mut [X], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

pub fn flip_vertical<X: Copy>(plane: &mut [X], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            plane.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Augment one image `(C, H, W)` in place, and its mask when given.
pub fn apply_augment<T: Real>(image: &mut [T], c: usize, h: usize, w: usize, mask: Option<&mut [usize]>, d: &AugmentDraws) {
    let hw = h * w;
    if d.hflip {
        image.chunks_mut(hw).for_each(|p| flip_horizontal(p, w));
    }
    if d.vflip {
        image.chunks_mut(hw).for_each(|p| flip_vertical(p, h, w));
    }
    if let Some(m) = mask {
        if d.hflip {
            flip_horizontal(m, w);
        }
        if d.vflip {
            flip_vertical(m, h, w);
        }
    }
    if let Some([b, k, s]) = d.jitter {
        let (b, k, s) = (T::of(b), T::of(k), T::of(s));
        image.iter_mut().for_each(|v| *v *= b);
        let mean = image.iter().copied().sum::<T>() / T::of(image.len().max(1) as f64);
        image.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
        if c > 1 {
            let inv = T::one() / T::of(c as f64);
            for p in 0..hw {
                let gray = (0..c).map(|ch| image[ch * hw + p]).sum::<T>() * inv;
                for ch in 0..c {
                    let v = &mut image[ch * hw + p];
                    *v = gray + (*v - gray) * s;
                }
            }
        }
        image.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
    }
}

/// Augmented copy of a batch of samples.
pub fn augment_batch<T: Real>(images: &mut Tensor<T>, labels: &mut Labels, rng: &mut Rng) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let chw = c * h * w;
    for i in 0..n {
        let d = AugmentDraws::sample(rng);
        let img = &mut images.data_mut()[i * chw..(i + 1) * chw];
        match labels {
            Labels::Mask { data, .. } => apply_augment(img, c, h, w, Some(&mut data[i * h * w..(i + 1) * h * w]), &d),
            _ => apply_augment(img, c, h, w, None, &d),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    /// Chosen sample indices, ascending.
    pub indices: Vec<usize>,
    /// Strata whose share rounded to zero and were raised to one sample.
    pub floored: Vec<usize>,
}

/// Keep `round(fraction * n_c)` samples of every stratum `c`, at least one.
pub fn stratified_subsample(strata: &[usize], fraction: f64, seed: u64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in strata.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut indices = Vec::new();
    let mut floored = Vec::new();
    for (c, mut members) in by_class {
        let mut k = libm::round(fraction * members.len() as f64) as usize;
        if k == 0 {
            k = 1;
            floored.push(c);
        }
        if k < members.len() {
            members.shuffle(&mut rng);
        }
        indices.extend_from_slice(&members[..k]);
    }
    indices.sort_unstable();
    Ok(Subsample { indices, floored })
}

/// Parameters of the synthetic shape benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Share of object classes rendered as small dots; the rest are large
    /// polygons.
    pub small_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { train: 200, val: 50, test: 50, image_size: 64, num_classes: 5, small_fraction: 0.5, noise: 0.05, seed: 0 }
    }
}

pub const RGB: [&str; 3] = ["red", "green", "blue"];

pub fn rgb_bands() -> Vec<String> {
    RGB.iter().map(|s| String::from(*s)).collect()
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl SyntheticSpec {
    fn validate(&self, max_classes: usize) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > max_classes {
            return Err(Error::Config(format!("class count {} outside [2, {max_classes}]", self.num_classes)));
        }
        if self.image_size < 8 || !(0.0..=1.0).contains(&self.small_fraction) || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }

    /// Object classes `1..K` rendered as dots.
    pub fn dot_classes(&self) -> Vec<usize> {
        let objects = self.num_classes - 1;
        let dots = libm::round(self.small_fraction * objects as f64) as usize;
        (1..=dots.min(objects)).collect()
    }
}

const PALETTE: [[f64; 3]; 10] = [
    [0.35, 0.45, 0.30],
    [0.85, 0.20, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.25, 0.75, 0.70],
    [0.75, 0.35, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
    [0.10, 0.10, 0.10],
    [0.95, 0.95, 0.95],
];

/// Noise-free texture of segmentation class `class` at pixel `(y, x)`.
pub fn class_texture(class: usize, channel: usize, y: usize, x: usize) -> f64 {
    let base = PALETTE[class % PALETTE.len()][channel % 3];
    let period = 3.0 + (class % 4) as f64;
    let phase = if class % 2 == 0 { (y + x) as f64 } else { y as f64 * 2.0 - x as f64 };
    (base + 0.08 * libm::sin(core::f64::consts::TAU * phase / period)).clamp(0.0, 1.0)
}

fn fill_disc(mask: &mut [usize], size: usize, cy: f64, cx: f64, r: f64, class: usize) {
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                mask[y * size + x] = class;
            }
        }
    }
}

/// Random convex-ish star polygon filled by an angular radius test.
fn fill_polygon(mask: &mut [usize], size: usize, rng: &mut Rng, class: usize) {
    let s = size as f64;
    let cy = rng.random_range(0.2 * s..0.8 * s);
    let cx = rng.random_range(0.2 * s..0.8 * s);
    let verts = rng.random_range(5..=7);
    let radii: Vec<f64> = (0..verts).map(|_| rng.random_range(0.18 * s..0.32 * s)).collect();
    let rot = rng.random_range(0.0..core::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let a = libm::atan2(dy, dx) - rot;
            let a = a - core::f64::consts::TAU * libm::floor(a / core::f64::consts::TAU);
            let pos = a / core::f64::consts::TAU * verts as f64;
            let i = pos as usize % verts;
            let f = pos - libm::floor(pos);
            let r = radii[i] * (1.0 - f) + radii[(i + 1) % verts] * f;
            if dy * dy + dx * dx <= r * r {
                mask[y * size + x] = class;
            }
        }
    }
}

fn render<T: Real>(mask: &[usize], size: usize, noise: f64, rng: &mut Rng, out: &mut Vec<T>) {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let mut v = class_texture(mask[y * size + x], ch, y, x);
                if noise > 0.0 {
                    v = (v + normal.sample(rng)).clamp(0.0, 1.0);
                }
                out.push(T::of(v));
            }
        }
    }
}

fn split_sizes(spec: &SyntheticSpec) -> [(usize, u64); 3] {
    [(spec.train, 0), (spec.val, 1), (spec.test, 2)]
}

/// Textured background (class 0) with large polygons and small dots of the
/// object classes. Every object class appears in the training split.
pub fn generate_shapes_segmentation<T: Real>(spec: &SyntheticSpec) -> Result<Splits<T>> {
    spec.validate(PALETTE.len())?;
    let size = spec.image_size;
    let dots = spec.dot_classes();
    let polys: Vec<usize> = (dots.len() + 1..spec.num_classes).collect();
    let objects = spec.num_classes - 1;
    let mut sets = Vec::new();
    for (n, tag) in split_sizes(spec) {
        let mut rng = Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(tag));
        let mut images = Vec::with_capacity(n * 3 * size * size);
        let mut masks = Vec::with_capacity(n * size * size);
        for i in 0..n {
            let mut mask = alloc::vec![0usize; size * size];
            let anchor = i % objects + 1;
            let n_poly = if polys.is_empty() { 0 } else { rng.random_range(1..=2) };
            for p in 0..n_poly {
                let c = if p == 0 && polys.contains(&anchor) { anchor } else { polys[rng.random_range(0..polys.len())] };
                fill_polygon(&mut mask, size, &mut rng, c);
            }
            let n_dots = if dots.is_empty() { 0 } else { rng.random_range(3..=7) };
            let s = size as f64;
            for d in 0..n_dots {
                let c = if d == 0 && dots.contains(&anchor) { anchor } else { dots[rng.random_range(0..dots.len())] };
                let r = rng.random_range(0.04 * s..0.07 * s).max(1.0);
                let cy = rng.random_range(r..s - r);
                let cx = rng.random_range(r..s - r);
                fill_disc(&mut mask, size, cy, cx, r, c);
            }
            render(&mask, size, spec.noise, &mut rng, &mut images);
            masks.extend_from_slice(&mask);
        }
        let images = Tensor::from_vec(&[n, 3, size, size], images)?;
        sets.push(Dataset::new(images, Labels::Mask { data: masks, h: size, w: size }, rgb_bands(), spec.num_classes, None)?);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(Splits { train, val, test })
}

/// Shape types available to the classification benchmark.
pub const SHAPES: [&str; 8] = ["disc", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar"];

/// Whether normalised offset `(u, v)` in `[-1, 1]^2` lies inside `shape`.
pub fn shape_contains(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => v <= 0.8 && v >= 2.0 * au - 1.0,
        3 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        4 => {
            let r = u * u + v * v;
            (0.3..=1.0).contains(&r)
        }
        5 => au + av <= 1.0,
        6 => au <= 1.0 && av <= 0.35,
        _ => au <= 0.35 && av <= 1.0,
    }
}

fn stamp(mask: &mut [bool], size: usize, rng: &mut Rng, shape: usize, lo: f64, hi: f64) {
    let s = size as f64;
    let r = rng.random_range(lo * s..hi * s);
    let cy = rng.random_range(r..(s - r).max(r + 1e-9));
    let cx = rng.random_range(r..(s - r).max(r + 1e-9));
    for y in 0..size {
        for x in 0..size {
            let (v, u) = ((y as f64 + 0.5 - cy) / r, (x as f64 + 0.5 - cx) / r);
            if shape_contains(shape, u, v) {
                mask[y * size + x] = true;
            }
        }
    }
}

/// One shape per image whose type is the class (balanced and shuffled), or,
/// with `multi_label`, a random nonempty subset of shape types per image.
pub fn generate_shapes_classification<T: Real>(spec: &SyntheticSpec, multi_label: bool) -> Result<Splits<T>> {
    spec.validate(SHAPES.len())?;
    let size = spec.image_size;
    let k = spec.num_classes;
    let mut sets = Vec::new();
    for (n, tag) in split_sizes(spec) {
        let mut rng = Rng::seed_from_u64(spec.seed.wrapping_mul(0x85eb_ca6b).wrapping_add(tag));
        let mut order: Vec<usize> = (0..n).map(|i| i % k).collect();
        order.shuffle(&mut rng);
        let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut images = Vec::with_capacity(n * 3 * size * size);
        let mut labels = Vec::new();
        for &class in &order {
            let present: Vec<usize> = if multi_label {
                let mut p: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
                if p.is_empty() {
                    p.push(class);
                }
                p
            } else {
                alloc::vec![class]
            };
            let bg = PALETTE[0];
            let mut pixels = alloc::vec![[bg[0], bg[1], bg[2]]; size * size];
            let (lo, hi) = if multi_label { (0.12, 0.22) } else { (0.25, 0.42) };
            for &shape in &present {
                let mut m = alloc::vec![false; size * size];
                stamp(&mut m, size, &mut rng, shape, lo, hi);
                let color = PALETTE[rng.random_range(1..PALETTE.len())];
                for (p, _) in pixels.iter_mut().zip(&m).filter(|(_, &b)| b) {
                    *p = color;
                }
            }
            for ch in 0..3 {
                for (i, p) in pixels.iter().enumerate() {
                    let (y, x) = (i / size, i % size);
                    let tex = 0.05 * libm::sin(core::f64::consts::TAU * (y + x) as f64 / 5.0);
                    let mut v = p[ch] + tex;
                    if spec.noise > 0.0 {
                        v += normal.sample(&mut rng);
                    }
                    images.push(T::of(v.clamp(0.0, 1.0)));
                }
            }
            if multi_label {
                labels.extend((0..k).map(|c| present.contains(&c) as usize));
            } else {
                labels.push(class);
            }
        }
        let labels = if multi_label { Labels::MultiLabel { data: labels.iter().map(|&b| b as u8).collect(), labels: k } } else { Labels::Class(labels) };
        let images = Tensor::from_vec(&[n, 3, size, size], images)?;
        sets.push(Dataset::new(images, labels, rgb_bands(), k, None)?);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| String::from(*s)).collect()
    }

    #[test]
    fn normalization_examples() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], alloc::vec![0.0, 51.0, 7.0, 7.0]).unwrap();
        let stats = BandStats { min: alloc::vec![0.0, 7.0], max: alloc::vec![255.0, 7.0] };
        let y = normalize_bands(&x, &stats).unwrap();
        assert_eq!(y.data(), &[0.0, 0.2, 0.0, 0.0]);
        let back = denormalize_bands(&y, &stats).unwrap();
        assert!((back.data()[1] - 51.0).abs() < 1e-12);
        assert!(normalize_bands(&x, &BandStats { min: alloc::vec![0.0], max: alloc::vec![1.0] }).is_err());
    }

    #[test]
    fn band_matching() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 + 1.0);
        let y = match_bands(&x, &names(&["red", "green"]), &names(&["red", "green", "blue"])).unwrap();
        assert_eq!(&y.data()[..8], x.data());
        assert!(y.data()[8..].iter().all(|&v| v == 0.0));
        let id = match_bands(&x, &names(&["red", "green"]), &names(&["red", "green"])).unwrap();
        assert_eq!(id, x);
        assert!(match_bands(&x, &names(&["red", "green"]), &[]).is_err());
    }

    #[test]
    fn flips_are_involutions_and_keep_alignment() {
        let mut img: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut mask: Vec<usize> = (0..6).collect();
        let d = AugmentDraws { hflip: true, vflip: true, jitter: None };
        apply_augment(&mut img, 2, 2, 3, Some(&mut mask), &d);
        for (p, &m) in mask.iter().enumerate() {
            assert_eq!(img[p], m as f64);
        }
        apply_augment(&mut img, 2, 2, 3, Some(&mut mask), &d);
        assert_eq!(mask, (0..6).collect::<Vec<_>>());
        let before = img.clone();
        apply_augment(&mut img, 2, 2, 3, Some(&mut mask), &AugmentDraws::none());
        assert_eq!(img, before);
    }

    #[test]
    fn jitter_leaves_masks() {
        let mut img: Vec<f64> = (0..12).map(|v| v as f64 / 12.0).collect();
        let mut mask: Vec<usize> = (0..4).collect();
        let d = AugmentDraws { hflip: false, vflip: false, jitter: Some([1.2, 0.8, 1.1]) };
        apply_augment(&mut img, 3, 2, 2, Some(&mut mask), &d);
        assert_eq!(mask, [0, 1, 2, 3]);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn subsample_counts() {
        let strata: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let a = stratified_subsample(&strata, 0.1, 1).unwrap();
        let b = stratified_subsample(&strata, 0.1, 2).unwrap();
        assert_eq!(a.indices.len(), 50);
        assert_ne!(a.indices, b.indices);
        assert_eq!(stratified_subsample(&strata, 1.0, 3).unwrap().indices, (0..500).collect::<Vec<_>>());
        let small = stratified_subsample(&[0, 0, 0, 1], 0.1, 0).unwrap();
        assert_eq!(small.indices.len(), 2);
        assert_eq!(small.floored, [0, 1]);
        assert!(stratified_subsample(&strata, 0.0, 0).is_err());
    }

    #[test]
    fn segmentation_generator() {
        let spec = SyntheticSpec { train: 8, val: 2, test: 2, image_size: 16, noise: 0.0, ..Default::default() };
        let s = generate_shapes_segmentation::<f64>(&spec).unwrap();
        let again = generate_shapes_segmentation::<f64>(&spec).unwrap();
        assert_eq!(s.train, again.train);
        let Labels::Mask { data, .. } = &s.train.labels else { panic!() };
        for c in 0..spec.num_classes {
            assert!(data.contains(&c), "class {c} missing");
        }
        for (i, &c) in data.iter().enumerate() {
            let (b, p) = (i / 256, i % 256);
            for ch in 0..3 {
                assert_eq!(s.train.images.data()[(b * 3 + ch) * 256 + p], class_texture(c, ch, p / 16, p % 16));
            }
        }
        assert!(generate_shapes_segmentation::<f64>(&SyntheticSpec { num_classes: 1, ..spec }).is_err());
    }

    #[test]
    fn classification_generator() {
        let spec = SyntheticSpec { train: 10, val: 5, test: 5, image_size: 16, ..Default::default() };
        let s = generate_shapes_classification::<f32>(&spec, false).unwrap();
        let Labels::Class(v) = &s.train.labels else { panic!() };
        assert_eq!((0..5).map(|c| v.iter().filter(|&&l| l == c).count()).collect::<Vec<_>>(), [2; 5]);
        let m = generate_shapes_classification::<f32>(&spec, true).unwrap();
        let Labels::MultiLabel { data, labels } = &m.train.labels else { panic!() };
        assert!(data.chunks(*labels).all(|r| r.iter().any(|&b| b == 1)));
    }
}
