//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that (transitively) depends on a leaf created with
//! `needs_grad = true`.

pub(crate) mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use kernels::{ConvGeom, NormStats};

use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    /// tanh approximation
    Gelu,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, shared_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, stats: NormStats<T>, rows: usize, len: usize, kind: NormKind },
    Act(Var, Activation),
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    UpsampleNearest(Var, usize),
    ResizeBilinear(Var),
    AdaptiveAvgPool(Var),
    SpatialMean(Var),
    Sum(Var),
    Mean(Var),
    TopKSoftmax { x: Var, kept: Vec<bool>, dim: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, weights: Option<Vec<T>>, total_weight: T },
    BceLogits { logits: Var, targets: Vec<T> },
    Mse(Var, Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
enum NormKind {
    /// `(n, c, h, w)` with `groups`
    Group { c: usize, groups: usize, hw: usize },
    /// normalize the trailing axis
    Layer,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err(alloc::format!("broadcast rank mismatch {sa:?} vs {sb:?}")));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, y) => Ok(y),
                (x, 1) => Ok(x),
                _ => Err(shape_err(alloc::format!("cannot broadcast {sa:?} with {sb:?}"))),
            })
            .collect()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.broadcast(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = kernels::broadcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), &shape, f);
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Sum of several same-shaped tensors.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or_else(|| Error::Empty("add_all".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Batched matrix product over the trailing two axes.
    ///
    /// `a` is `(..., m, k)` (or `(..., k, m)` with `ta`); `b` either shares
    /// `a`'s batch axes or is a single rank-2 matrix applied to every batch.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(alloc::format!("matmul needs rank >= 2, got {sa:?} @ {sb:?}")));
        }
        let batch_shape = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if !shared_b && &sb[..sb.len() - 2] != batch_shape {
            return Err(shape_err(alloc::format!("matmul batch mismatch {sa:?} @ {sb:?}")));
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(alloc::format!("matmul inner mismatch {sa:?} @ {sb:?}")));
        }
        let batch = numel(batch_shape);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let am = MatRef { data: &va[i * ar * ac..(i + 1) * ar * ac], rows: ar, cols: ac, trans: ta };
                let boff = if shared_b { 0 } else { i * br * bc };
                let bm = MatRef { data: &vb[boff..boff + br * bc], rows: br, cols: bc, trans: tb };
                gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let mut shape = batch_shape.to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, shared_b }, &[a, b]))
    }

    /// `x @ w^T + b` over the trailing axis; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(b) => {
                let rank = self.shape(y).len();
                let out = self.shape(b)[0];
                let mut bshape = vec![1; rank];
                bshape[rank - 1] = out;
                let b = self.reshape(b, &bshape)?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(shape_err(alloc::format!("conv2d expects {ci} input channels, got {c}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(alloc::format!("conv2d bias shape {:?}", self.shape(b))));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(shape_err(alloc::format!("conv2d kernel {kh}x{kw} too large for {h}x{wd}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[n, o, oh, ow], data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(alloc::format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm affine shape".into()));
        }
        let hw = h * w;
        let len = (c / groups) * hw;
        let rows = n * groups;
        let cpg = c / groups;
        let chan = move |r: usize, i: usize| (r % groups) * cpg + i / hw;
        let (data, stats) = kernels::norm_forward(
            self.value(x).data(),
            rows,
            len,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
            chan,
        );
        let value = Tensor::from_vec(&[n, c, h, w], data)?;
        let kind = NormKind::Group { c, groups, hw };
        Ok(self.push(value, Op::Norm { x, gamma, beta, stats, rows, len, kind }, &[x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(shape_err("layer_norm affine shape".into()));
        }
        let rows = numel(&shape) / len;
        let (data, stats) = kernels::norm_forward(
            self.value(x).data(),
            rows,
            len,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
            |_, i| i,
        );
        let value = Tensor::from_vec(&shape, data)?;
        let kind = NormKind::Layer;
        Ok(self.push(value, Op::Norm { x, gamma, beta, stats, rows, len, kind }, &[x, gamma, beta]))
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        let value = self.value(x).map(|v| act_forward(a, v));
        self.push(value, Op::Act(x, a), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Gelu)
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(shape_err(alloc::format!("axis {axis} out of range for {shape:?}")));
        }
        Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = Self::axis_split(&shape, axis)?;
        let data = kernels::softmax_forward(self.value(x).data(), outer, dim, inner);
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Softmax { x, outer, dim, inner }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(alloc::format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(plane[(y / factor) * w + xx / factor]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::UpsampleNearest(x, factor), &[x]))
    }

    /// Bilinear resampling with half-pixel centers (`align_corners = false`).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let ty = kernels::bilinear_taps(h, oh);
        let tx = kernels::bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, ly) in &ty {
                let ly = T::of(ly);
                for &(x0, x1, lx) in &tx {
                    let lx = T::of(lx);
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    out.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::ResizeBilinear(x), &[x]))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let wy = kernels::adaptive_windows(h, oh);
        let wx = kernels::adaptive_windows(w, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1) in &wy {
                for &(x0, x1) in &wx {
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += plane[y * w + xx];
                        }
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// `(n, c, h, w) -> (n, c)` mean over pixels.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(value, Op::SpatialMean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.numel().max(1) as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    /// Rows `rows` of the leading axis, in order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Zero tensor with `total` leading rows where row `rows[i]` receives
    /// row `i` of `x` (summed on repeats).
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != rows.len() {
            return Err(shape_err(alloc::format!("scatter of {shape:?} to {} rows", rows.len())));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= total) {
            return Err(shape_err(alloc::format!("scatter row {r} out of range {total}")));
        }
        let inner = numel(&shape[1..]);
        let mut data = vec![T::zero(); total * inner];
        let src = self.value(x).data();
        for (i, &r) in rows.iter().enumerate() {
            for (d, s) in data[r * inner..(r + 1) * inner].iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                *d += *s;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = total;
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(value, Op::ScatterRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Softmax over the `k` largest entries of each trailing-axis row; all
    /// other entries are exactly zero. Ties resolve toward the lower index.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| shape_err("topk on scalar".into()))?;
        if k == 0 || k > dim {
            return Err(Error::Config(alloc::format!("top_k = {k} outside [1, {dim}]")));
        }
        let src = self.value(x).data();
        let mut kept = vec![false; src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut order: Vec<usize> = Vec::with_capacity(dim);
        for (r, row) in src.chunks(dim).enumerate() {
            order.clear();
            order.extend(0..dim);
            order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(core::cmp::Ordering::Equal).then(i.cmp(&j)));
            let top = &order[..k];
            let m = top.iter().map(|&i| row[i]).fold(T::neg_infinity(), T::max);
            let s: T = top.iter().map(|&i| (row[i] - m).exp()).sum();
            for &i in top {
                kept[r * dim + i] = true;
                out[r * dim + i] = (row[i] - m).exp() / s;
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::TopKSoftmax { x, kept, dim }, &[x]))
    }

    /// Weighted mean softmax cross-entropy. `logits` is `(n, classes)` or
    /// `(n, classes, h, w)`; `targets` lists one entry per sample/pixel with
    /// `None` marking ignored positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(alloc::format!("cross_entropy logits {shape:?}")));
        }
        let (n, classes) = (shape[0], shape[1]);
        let positions = numel(&shape[2..]);
        if targets.len() != n * positions {
            return Err(shape_err(alloc::format!("{} targets for {} positions", targets.len(), n * positions)));
        }
        if let Some(w) = weights {
            if w.len() != classes {
                return Err(shape_err("class weight length".into()));
            }
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        let mut wsum = T::zero();
        for (idx, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(Error::Label(alloc::format!("class {t} outside [0, {classes})")));
            }
            let (b, p) = (idx / positions, idx % positions);
            let at = |c: usize| x[(b * classes + c) * positions + p];
            let m = (0..classes).map(at).fold(T::neg_infinity(), T::max);
            let lse = (0..classes).map(|c| (at(c) - m).exp()).sum::<T>().ln() + m;
            let wt = weights.map_or(T::one(), |w| w[t]);
            total += wt * (lse - at(t));
            wsum += wt;
        }
        let loss = if wsum > T::zero() { total / wsum } else { T::zero() };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.map(|w| w.to_vec()),
            total_weight: wsum,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean binary cross-entropy on raw logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        self.value(logits).same_shape(targets)?;
        let x = self.value(logits).data();
        let n = T::of(x.len().max(1) as f64);
        let loss = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let op = Op::BceLogits { logits, targets: targets.data().to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::of(va.len().max(1) as f64);
        let loss = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(alloc::format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let t = Tensor::from_vec(self.shape(v), data)?;
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::GatherRows { x, rows } => {
                let shape = self.shape(*x);
                let inner = numel(&shape[1..]);
                let mut d = vec![T::zero(); numel(shape)];
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in d[r * inner..(r + 1) * inner].iter_mut().zip(&gd[i * inner..(i + 1) * inner]) {
                        *a += *b;
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::ScatterRows { x, rows } => {
                let inner = numel(&self.shape(*x)[1..]);
                let mut d = Vec::with_capacity(rows.len() * inner);
                for &r in rows {
                    d.extend_from_slice(&gd[r * inner..(r + 1) * inner]);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.needs_grad(*a) {
                    let d = kernels::reduce_to(gd, g.shape(), self.shape(*a));
                    self.accumulate(grads, *a, d)?;
                }
                if self.needs_grad(*b) {
                    let mut d = kernels::reduce_to(gd, g.shape(), self.shape(*b));
                    d.iter_mut().for_each(|v| *v *= sign);
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs_grad(this) {
                        continue;
                    }
                    let o = self.value(other);
                    let prod = kernels::broadcast_binary(gd, g.shape(), o.data(), o.shape(), g.shape(), |x, y| x * y);
                    let d = kernels::reduce_to(&prod, g.shape(), self.shape(this));
                    self.accumulate(grads, this, d)?;
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *s).collect())?;
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec())?,
            Op::MatMul { a, b, ta, tb, shared_b } => self.matmul_backward(*a, *b, *ta, *tb, *shared_b, g, grads)?,
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.needs_grad(*x), self.needs_grad(*w), b.is_some_and(|b| self.needs_grad(b)));
                let cg = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Norm { x, gamma, beta, stats, rows, len, kind } => {
                let c = self.shape(*gamma)[0];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let dx = match *kind {
                    NormKind::Group { c, groups, hw } => {
                        let cpg = c / groups;
                        kernels::norm_backward(
                            self.value(*x).data(),
                            gd,
                            *rows,
                            *len,
                            stats,
                            self.value(*gamma).data(),
                            &mut dgamma,
                            &mut dbeta,
                            move |r, i| (r % groups) * cpg + i / hw,
                        )
                    }
                    NormKind::Layer => kernels::norm_backward(
                        self.value(*x).data(),
                        gd,
                        *rows,
                        *len,
                        stats,
                        self.value(*gamma).data(),
                        &mut dgamma,
                        &mut dbeta,
                        |_, i| i,
                    ),
                };
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Act(x, a) => {
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&v, &gv)| gv * act_derivative(*a, v)).collect();
                self.accumulate(grads, *x, d)?;
            }
            Op::Softmax { x, outer, dim, inner } => {
                let d = kernels::softmax_backward(out.data(), gd, *outer, *dim, *inner);
                self.accumulate(grads, *x, d)?;
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, _) = kernels::permute(gd, g.shape(), &inv);
                self.accumulate(grads, *x, d)?;
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec())?,
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs_grad(p) {
                        let d = g.narrow(*axis, start, len)?.into_vec();
                        self.accumulate(grads, p, d)?;
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let (dim, len) = (shape[*axis], g.shape()[*axis]);
                let mut d = vec![T::zero(); numel(shape)];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::UpsampleNearest(x, factor) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let ow = w * factor;
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * h * w * factor * factor..(p + 1) * h * w * factor * factor];
                    for (idx, &v) in src.iter().enumerate() {
                        let (y, xx) = (idx / ow, idx % ow);
                        d[p * h * w + (y / factor) * w + xx / factor] += v;
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::ResizeBilinear(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut d[p * h * w..(p + 1) * h * w];
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::of(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::of(lx);
                            let v = src[oy * ow + ox];
                            plane[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                            plane[y0 * w + x1] += v * (T::one() - ly) * lx;
                            plane[y1 * w + x0] += v * ly * (T::one() - lx);
                            plane[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::AdaptiveAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let wy = kernels::adaptive_windows(h, oh);
                let wx = kernels::adaptive_windows(w, ow);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut d[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1)) in wy.iter().enumerate() {
                        for (ox, &(x0, x1)) in wx.iter().enumerate() {
                            let v = gd[p * oh * ow + oy * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    plane[y * w + xx] += v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::SpatialMean(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let inv = T::one() / T::of((h * w) as f64);
                let d = gd.iter().flat_map(|&v| core::iter::repeat_n(v * inv, h * w)).collect();
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n])?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0] / T::of(n.max(1) as f64); n])?;
            }
            Op::TopKSoftmax { x, kept, dim } => {
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.len() / dim {
                    let row = r * dim..(r + 1) * dim;
                    let dot: T = row.clone().filter(|&j| kept[j]).map(|j| gd[j] * y[j]).sum();
                    for j in row.filter(|&j| kept[j]) {
                        d[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::CrossEntropy { logits, targets, weights, total_weight } => {
                let shape = self.shape(*logits);
                let (classes, positions) = (shape[1], numel(&shape[2..]));
                let x = self.value(*logits).data();
                let mut d = vec![T::zero(); x.len()];
                if *total_weight > T::zero() {
                    for (idx, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let (b, p) = (idx / positions, idx % positions);
                        let at = |c: usize| (b * classes + c) * positions + p;
                        let m = (0..classes).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
                        let s: T = (0..classes).map(|c| (x[at(c)] - m).exp()).sum();
                        let wt = weights.as_ref().map_or(T::one(), |w| w[t]) * gd[0] / *total_weight;
                        for c in 0..classes {
                            let p = (x[at(c)] - m).exp() / s;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            d[at(c)] += wt * (p - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let n = T::of(x.len().max(1) as f64);
                let d = x
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (sigmoid(x) - y) * gd[0] / n)
                    .collect();
                self.accumulate(grads, *logits, d)?;
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = T::of(va.len().max(1) as f64);
                let two = T::of(2.0);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| two * (x - y) * gd[0] / n).collect();
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, da.iter().map(|&v| -v).collect())?;
                }
                self.accumulate(grads, *a, da)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        shared_b: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let gs = g.shape();
        let (m, n) = (gs[gs.len() - 2], gs[gs.len() - 1]);
        let batch = numel(&gs[..gs.len() - 2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let gd = g.data();
        if self.needs_grad(a) {
            let mut da = vec![T::zero(); va.len()];
            for i in 0..batch {
                let gm = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                let boff = if shared_b { 0 } else { i * br * bc };
                let bm = MatRef { data: &vb[boff..boff + br * bc], rows: br, cols: bc, trans: tb };
                let dst = &mut da[i * ar * ac..(i + 1) * ar * ac];
                if ta {
                    gemm(bm, gm.t(), dst, false);
                } else {
                    gemm(gm, bm.t(), dst, false);
                }
            }
            self.accumulate(grads, a, da)?;
        }
        if self.needs_grad(b) {
            let mut db = vec![T::zero(); vb.len()];
            for i in 0..batch {
                let gm = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                let am = MatRef { data: &va[i * ar * ac..(i + 1) * ar * ac], rows: ar, cols: ac, trans: ta };
                let boff = if shared_b { 0 } else { i * br * bc };
                let dst = &mut db[boff..boff + br * bc];
                if tb {
                    gemm(gm.t(), am, dst, shared_b);
                } else {
                    gemm(am.t(), gm, dst, shared_b);
                }
            }
            self.accumulate(grads, b, db)?;
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn act_forward<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Relu => x.max(T::zero()),
        Activation::Silu => x * sigmoid(x),
        Activation::Gelu => {
            let inner = T::of(GELU_K) * (x + T::of(0.044715) * x * x * x);
            T::of(0.5) * x * (T::one() + inner.tanh())
        }
    }
}

#[inline]
fn act_derivative<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Gelu => {
            let k = T::of(GELU_K);
            let c = T::of(0.044715);
            let inner = k * (x + c * x * x * x);
            let th = inner.tanh();
            let sech2 = T::one() - th * th;
            T::of(0.5) * (T::one() + th) + T::of(0.5) * x * sech2 * k * (T::one() + T::of(3.0) * c * x * x)
        }
    }
}
