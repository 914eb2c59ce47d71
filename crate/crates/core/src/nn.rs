//! Named parameter storage and the handful of layers the models are built from.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Flat, ordered collection of named tensors. Insertion order is stable and
/// defines serialization order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.entries.iter_mut().for_each(|e| e.trainable = false);
    }

    /// SHA-256 over names, shapes and `f64` bit patterns of every entry.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Overwrite values by name. Every stored entry must be supplied with a
    /// matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let t = lookup(&e.name).ok_or_else(|| Error::Param(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Param(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }
}

/// Binds store parameters into a graph on first use.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    grad: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `grad = false` builds an inference graph: no parameter receives a gradient.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, grad: bool) -> Self {
        Ctx { g, store, bound: vec![None; store.len()], grad }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.g.leaf(e.value.clone(), self.grad && e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradients for every bound trainable parameter, in id order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|t| (ParamId(i), t.clone()))
            })
            .collect()
    }
}

fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_out, fan_in], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt((cin * kernel * kernel).max(1) as f64);
        let w = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, kernel, kernel], bound));
        let b = Some(store.add(format!("{name}.bias"), uniform(rng, &[cout], bound)));
        Conv2d { w, b, stride, pad }
    }

    /// Per-pixel linear map (1x1 convolution).
    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, rng)
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Largest group count `<= 8` dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups: default_groups(channels) }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        cx.g.group_norm(x, g, b, self.groups, T::of(1e-5))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        cx.g.layer_norm(x, g, b, T::of(1e-5))
    }
}
