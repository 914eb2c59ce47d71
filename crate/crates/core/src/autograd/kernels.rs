//! Raw forward/backward kernels operating on contiguous slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, MatRef, Real};
use crate::tensor::numel;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides of `input` viewed in `out`'s coordinates; broadcast axes get 0.
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(input);
    input
        .iter()
        .zip(out)
        .zip(base)
        .map(|((&i, &o), s)| if i == o { s } else { 0 })
        .collect()
}

/// Visit every output position together with the matching offsets into two
/// strided inputs.
pub(crate) fn walk2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * last;
        for i in 0..last {
            f(base + i, oa + i * la, ob + i * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    walk2(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
    out
}

/// Sum `g` (shaped `g_shape`) down to `shape` over broadcast axes.
pub(crate) fn reduce_to<T: Real>(g: &[T], g_shape: &[usize], shape: &[usize]) -> Vec<T> {
    if g_shape == shape {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let so = broadcast_strides(shape, g_shape);
    let zeros = vec![0usize; g_shape.len()];
    walk2(g_shape, &so, &zeros, |i, io, _| out[io] += g[i]);
    out
}

pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = contiguous_strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0usize; shape.len()];
    let mut out = vec![T::zero(); x.len()];
    walk2(&out_shape, &src, &zeros, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * plane] };
    let wmat = MatRef::new(w, g.o, g.col_rows());
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let on = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        if g.is_pointwise() {
            gemm(wmat, MatRef::new(xn, g.c, plane), on, false);
        } else {
            im2col(xn, g, &mut cols);
            gemm(wmat, MatRef::new(&cols, g.col_rows(), plane), on, false);
        }
        if let Some(b) = bias {
            for (oc, &bv) in b.iter().enumerate() {
                on[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.oh * g.ow;
    let rows = g.col_rows();
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.o];
        for n in 0..g.n {
            for (oc, d) in db.iter_mut().enumerate() {
                let base = (n * g.o + oc) * plane;
                *d += dy[base..base + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); rows * plane] };
    let wmat = MatRef::new(w, g.o, rows);
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dyn_ = MatRef::new(&dy[n * g.o * plane..(n + 1) * g.o * plane], g.o, plane);
        if let Some(dw) = dw.as_mut() {
            if pointwise {
                gemm(dyn_, MatRef::new(xn, g.c, plane).t(), dw, true);
            } else {
                im2col(xn, g, &mut cols);
                gemm(dyn_, MatRef::new(&cols, rows, plane).t(), dw, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if pointwise {
                gemm(wmat.t(), dyn_, dxn, true);
            } else {
                gemm(wmat.t(), dyn_, &mut dcols, false);
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Statistics saved by the normalization kernels: per-group mean and inverse std.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalize `x` viewed as `(groups_total, group_len)` rows; `chan_of(row, i)`
/// maps an element to its affine channel.
pub(crate) fn norm_forward<T: Real>(
    x: &[T],
    rows: usize,
    len: usize,
    eps: T,
    gamma: &[T],
    beta: &[T],
    chan_of: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, NormStats<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let inv_len = T::one() / T::of(len as f64);
    for r in 0..rows {
        let xs = &x[r * len..(r + 1) * len];
        let m = xs.iter().copied().sum::<T>() * inv_len;
        let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_len;
        let rs = T::one() / (var + eps).sqrt();
        for (i, &v) in xs.iter().enumerate() {
            let c = chan_of(r, i);
            out[r * len + i] = (v - m) * rs * gamma[c] + beta[c];
        }
        mean.push(m);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    len: usize,
    stats: &NormStats<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    chan_of: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let nf = T::of(len as f64);
    let mut dxhat = vec![T::zero(); len];
    let mut xhat = vec![T::zero(); len];
    for r in 0..rows {
        let (m, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..len {
            let c = chan_of(r, i);
            let xh = (x[r * len + i] - m) * rs;
            let d = dy[r * len + i];
            dgamma[c] += d * xh;
            dbeta[c] += d;
            let dxh = d * gamma[c];
            xhat[i] = xh;
            dxhat[i] = dxh;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        for i in 0..len {
            dx[r * len + i] = rs / nf * (nf * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
        }
    }
    dx
}

/// Softmax along the middle axis of a `(outer, dim, inner)` view.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                s += *d;
            }
            let inv = T::one() / s;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let mut m = T::neg_infinity();
            for d in 0..dim {
                m = m.max(x[at(d)]);
            }
            let mut s = T::zero();
            for d in 0..dim {
                let e = (x[at(d)] - m).exp();
                out[at(d)] = e;
                s += e;
            }
            for d in 0..dim {
                out[at(d)] /= s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    outer: usize,
    dim: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let dot: T = (0..dim).map(|d| dy[at(d)] * y[at(d)]).sum();
            for d in 0..dim {
                dx[at(d)] = y[at(d)] * (dy[at(d)] - dot);
            }
        }
    }
    dx
}

/// Source index pairs and interpolation weight for one output coordinate,
/// half-pixel centers, edge clamped.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Adaptive pooling windows `[start, end)` per output cell.
pub(crate) fn adaptive_windows(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|o| {
            let start = (o * input) / output;
            let end = ((o + 1) * input).div_ceil(output);
            (start, end.max(start + 1))
        })
        .collect()
}
