//! Small conditional U-Net noise predictor with residual, self-attention and
//! cross-attention blocks at every scale.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Denoiser;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::real::Real;
use crate::taps::{Captures, Half, ModuleKind, TapPoint, TapRequest};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub num_scales: usize,
    pub channels_per_scale: Vec<usize>,
    pub blocks_per_scale: usize,
    pub attention_heads: usize,
    pub context_dim: usize,
    pub context_tokens: usize,
    pub latent_channels: usize,
    pub latent_size: (usize, usize),
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            num_scales: 4,
            channels_per_scale: alloc::vec![32, 64, 96, 128],
            blocks_per_scale: 1,
            attention_heads: 1,
            context_dim: 32,
            context_tokens: 4,
            latent_channels: 12,
            latent_size: (32, 32),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.num_scales;
        if s == 0 {
            return Err(Error::Config("num_scales must be at least 1".into()));
        }
        if self.channels_per_scale.len() != s {
            return Err(Error::Config(format!(
                "channels_per_scale has {} entries for {s} scales",
                self.channels_per_scale.len()
            )));
        }
        if self.blocks_per_scale == 0 || self.attention_heads == 0 || self.context_dim == 0 || self.context_tokens == 0 {
            return Err(Error::Config("blocks, heads and context sizes must be positive".into()));
        }
        if let Some(c) = self.channels_per_scale.iter().find(|c| **c == 0 || **c % self.attention_heads != 0) {
            return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.attention_heads)));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        let f = 1 << (s - 1);
        let (h, w) = self.latent_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("latent size {h}x{w} not divisible by {f}")));
        }
        Ok(())
    }

    /// Spatial size at 1-based scale `s`.
    pub fn scale_size(&self, s: usize) -> (usize, usize) {
        let f = 1 << (s - 1);
        (self.latent_size.0 / f, self.latent_size.1 / f)
    }

    pub fn channels(&self, s: usize) -> usize {
        self.channels_per_scale[s - 1]
    }

    /// Block index of encoder block `b`, decoder block `b` and the mid block.
    pub fn block_index(&self, half: Half, b: usize) -> usize {
        match half {
            Half::Encoder => b,
            Half::Decoder => self.blocks_per_scale + b,
            Half::Mid => 2 * self.blocks_per_scale,
        }
    }

    pub fn tap_points(&self) -> Vec<TapPoint> {
        let mut out = Vec::new();
        for s in 1..=self.num_scales {
            for half in [Half::Encoder, Half::Decoder] {
                for b in 0..self.blocks_per_scale {
                    for kind in ModuleKind::ALL {
                        out.push(TapPoint { scale: s, block: self.block_index(half, b), kind, half });
                    }
                }
            }
        }
        for kind in ModuleKind::ALL {
            out.push(TapPoint { scale: self.num_scales, block: self.block_index(Half::Mid, 0), kind, half: Half::Mid });
        }
        out.sort();
        out
    }
}

/// Fixed conditioning tokens shared by every denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext<T> {
    pub embedding: Tensor<T>,
    pub label: String,
}

impl<T: Real> ConditioningContext<T> {
    pub fn random(tokens: usize, dim: usize, label: impl Into<String>, seed: u64) -> Self {
        let mut rng = crate::rng(seed);
        let embedding = Tensor::from_fn(&[tokens, dim], |_| T::of(rng.random_range(-1.0..1.0)));
        ConditioningContext { embedding, label: label.into() }
    }

    /// `(batch, tokens, dim)` copy for batched attention.
    fn batched(&self, batch: usize) -> Tensor<T> {
        let mut shape = alloc::vec![batch];
        shape.extend_from_slice(self.embedding.shape());
        let one = self.embedding.data();
        Tensor::from_fn(&shape, |i| one[i % one.len()])
    }
}

struct Recorder<'r> {
    req: &'r TapRequest,
    features: Vec<(TapPoint, Var)>,
    maps: Vec<(TapPoint, Var)>,
}

impl Recorder<'_> {
    fn feature(&mut self, p: TapPoint, v: Var) {
        if self.req.points.contains(&p) {
            self.features.push((p, v));
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    temb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, temb: usize, rng: &mut Rng) -> Self {
        ResBlock {
            n1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            c1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng),
            temb: Linear::new(store, &format!("{name}.time"), temb, cout, true, rng),
            n2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            c2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::pointwise(store, &format!("{name}.skip"), cin, cout, rng)),
        }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.n1.forward(cx, x)?;
        let h = cx.g.silu(h);
        let h = self.c1.forward(cx, h)?;
        let t = self.temb.forward(cx, temb)?;
        let (b, c) = (cx.g.shape(t)[0], cx.g.shape(t)[1]);
        let t = cx.g.reshape(t, &[b, c, 1, 1])?;
        let h = cx.g.add(h, t)?;
        let h = self.n2.forward(cx, h)?;
        let h = cx.g.silu(h);
        let h = self.c2.forward(cx, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        cx.g.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    fn split<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (b, n, c, h) = (s[0], s[1], s[2], self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = cx.g.reshape(x, &[b, n, h, c / h])?;
        let x = cx.g.permute(x, &[0, 2, 1, 3])?;
        cx.g.reshape(x, &[b * h, n, c / h])
    }

    /// Returns the output projection and the attention probabilities
    /// `(B * heads, N, M)`.
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, kv: Var) -> Result<(Var, Var)> {
        let s = cx.g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, kv)?;
        let v = self.v.forward(cx, kv)?;
        let (q, k, v) = (self.split(cx, q)?, self.split(cx, k)?, self.split(cx, v)?);
        let scores = cx.g.matmul(q, k, false, true)?;
        let scores = cx.g.scale(scores, T::of(1.0 / libm::sqrt((c / self.heads) as f64)));
        let probs = cx.g.softmax(scores, 2)?;
        let mut o = cx.g.matmul(probs, v, false, false)?;
        if self.heads > 1 {
            let h = self.heads;
            o = cx.g.reshape(o, &[b, h, n, c / h])?;
            o = cx.g.permute(o, &[0, 2, 1, 3])?;
            o = cx.g.reshape(o, &[b, n, c])?;
        }
        Ok((self.out.forward(cx, o)?, probs))
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    sa: Attention,
    ln2: LayerNorm,
    ca: Attention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Conv2d,
}

impl TransformerBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, ctx_dim: usize, heads: usize, rng: &mut Rng) -> Self {
        TransformerBlock {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c),
            proj_in: Conv2d::pointwise(store, &format!("{name}.proj_in"), c, c, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            sa: Attention::new(store, &format!("{name}.self_attn"), c, c, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            ca: Attention::new(store, &format!("{name}.cross_attn"), c, ctx_dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), c),
            ff1: Linear::new(store, &format!("{name}.ff1"), c, 4 * c, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * c, c, true, rng),
            proj_out: Conv2d::pointwise(store, &format!("{name}.proj_out"), c, c, rng),
        }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, ctx: Var, at: (usize, usize, Half), rec: &mut Recorder<'_>) -> Result<Var> {
        let (b, c, h, w) = cx.g.value(x).dims4()?;
        let (scale, block, half) = at;
        let point = |kind| TapPoint { scale, block, kind, half };
        let y = self.norm.forward(cx, x)?;
        let y = self.proj_in.forward(cx, y)?;
        let y = cx.g.reshape(y, &[b, c, h * w])?;
        let mut tokens = cx.g.permute(y, &[0, 2, 1])?;

        let a_in = self.ln1.forward(cx, tokens)?;
        let (a, probs) = self.sa.forward(cx, a_in, a_in)?;
        rec.feature(point(ModuleKind::SelfAttention), a);
        if rec.req.attention_maps.contains(&point(ModuleKind::SelfAttention)) {
            rec.maps.push((point(ModuleKind::SelfAttention), probs));
        }
        tokens = cx.g.add(tokens, a)?;

        let c_in = self.ln2.forward(cx, tokens)?;
        let (ca, _) = self.ca.forward(cx, c_in, ctx)?;
        rec.feature(point(ModuleKind::CrossAttention), ca);
        tokens = cx.g.add(tokens, ca)?;

        let f = self.ln3.forward(cx, tokens)?;
        let f = self.ff1.forward(cx, f)?;
        let f = cx.g.gelu(f);
        let f = self.ff2.forward(cx, f)?;
        tokens = cx.g.add(tokens, f)?;

        let y = cx.g.permute(tokens, &[0, 2, 1])?;
        let y = cx.g.reshape(y, &[b, c, h, w])?;
        let y = self.proj_out.forward(cx, y)?;
        cx.g.add(x, y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    tr: TransformerBlock,
    scale: usize,
    index: usize,
    half: Half,
}

impl Block {
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, temb: Var, ctx: Var, rec: &mut Recorder<'_>) -> Result<Var> {
        let r = self.res.forward(cx, x, temb)?;
        rec.feature(TapPoint { scale: self.scale, block: self.index, kind: ModuleKind::ResNet, half: self.half }, r);
        self.tr.forward(cx, r, ctx, (self.scale, self.index, self.half), rec)
    }
}

/// The toy backbone. Parameters live in `store`; the layer structs only hold
/// ids into it.
#[derive(Debug, Clone)]
pub struct ToyUNet<T> {
    pub config: DenoiserConfig,
    pub store: ParamStore<T>,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    enc: Vec<Vec<Block>>,
    down: Vec<Conv2d>,
    mid: Block,
    dec: Vec<Vec<Block>>,
    up: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    taps: Vec<TapPoint>,
}

impl<T: Real> ToyUNet<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let cfg = &config;
        let c1 = cfg.channels(1);
        let temb = 4 * c1;
        let (heads, cdim) = (cfg.attention_heads, cfg.context_dim);
        let time1 = Linear::new(st, "time.fc1", c1, temb, true, rng);
        let time2 = Linear::new(st, "time.fc2", temb, temb, true, rng);
        let conv_in = Conv2d::same3(st, "conv_in", cfg.latent_channels, c1, rng);
        let block = |st: &mut ParamStore<T>, rng: &mut Rng, name: String, cin: usize, s: usize, half: Half, b: usize| {
            let c = cfg.channels(s);
            Block {
                res: ResBlock::new(st, &format!("{name}.res"), cin, c, temb, rng),
                tr: TransformerBlock::new(st, &format!("{name}.attn"), c, cdim, heads, rng),
                scale: s,
                index: cfg.block_index(half, b),
                half,
            }
        };
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for s in 1..=cfg.num_scales {
            let c = cfg.channels(s);
            let blocks =
                (0..cfg.blocks_per_scale).map(|b| block(st, rng, format!("enc.s{s}.b{b}"), c, s, Half::Encoder, b)).collect();
            enc.push(blocks);
            if s < cfg.num_scales {
                down.push(Conv2d::new(st, &format!("enc.s{s}.down"), c, cfg.channels(s + 1), 3, 2, 1, rng));
            }
        }
        let sm = cfg.num_scales;
        let mid = block(st, rng, "mid".into(), cfg.channels(sm), sm, Half::Mid, 0);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for s in 1..=cfg.num_scales {
            let c = cfg.channels(s);
            let blocks =
                (0..cfg.blocks_per_scale).map(|b| block(st, rng, format!("dec.s{s}.b{b}"), 2 * c, s, Half::Decoder, b)).collect();
            dec.push(blocks);
            if s > 1 {
                up.push(Conv2d::same3(st, &format!("dec.s{s}.up"), c, cfg.channels(s - 1), rng));
            }
        }
        let out_norm = GroupNorm::new(st, "out.norm", c1);
        let out_conv = Conv2d::same3(st, "out.conv", c1, cfg.latent_channels, rng);
        let taps = config.tap_points();
        Ok(ToyUNet { config, store, time1, time2, conv_in, enc, down, mid, dec, up, out_norm, out_conv, taps })
    }

    fn timestep_embedding(&self, timesteps: &[usize]) -> Tensor<T> {
        let dim = self.config.channels(1);
        let half = dim / 2;
        Tensor::from_fn(&[timesteps.len(), dim], |i| {
            let (b, j) = (i / dim, i % dim);
            let t = timesteps[b] as f64;
            let k = if j < half { j } else { j - half };
            if k >= half {
                return T::zero();
            }
            let freq = libm::exp(-libm::log(10000.0) * k as f64 / half.max(1) as f64);
            T::of(if j < half { libm::sin(t * freq) } else { libm::cos(t * freq) })
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if (c, (h, w)) != (cfg.latent_channels, cfg.latent_size) {
            return Err(Error::Shape(format!(
                "latent {c}x{h}x{w} does not match configured {}x{}x{}",
                cfg.latent_channels, cfg.latent_size.0, cfg.latent_size.1
            )));
        }
        Ok(b)
    }

    /// Build the noise prediction for `x` with one timestep per sample.
    fn build(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        timesteps: &[usize],
        ctx: &ConditioningContext<T>,
        rec: &mut Recorder<'_>,
    ) -> Result<Var> {
        let b = cx.g.shape(x)[0];
        if timesteps.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", timesteps.len())));
        }
        let want = [self.config.context_tokens, self.config.context_dim];
        if ctx.embedding.shape() != want {
            return Err(Error::Shape(format!("context {:?}, expected {want:?}", ctx.embedding.shape())));
        }
        let ctxv = cx.constant(ctx.batched(b));
        let temb = cx.constant(self.timestep_embedding(timesteps));
        let temb = self.time1.forward(cx, temb)?;
        let temb = cx.g.silu(temb);
        let temb = self.time2.forward(cx, temb)?;
        let temb = cx.g.silu(temb);

        let mut h = self.conv_in.forward(cx, x)?;
        let mut skips = Vec::new();
        for (si, blocks) in self.enc.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(cx, h, temb, ctxv, rec)?;
                skips.push(h);
            }
            if let Some(d) = self.down.get(si) {
                h = d.forward(cx, h)?;
            }
        }
        h = self.mid.forward(cx, h, temb, ctxv, rec)?;
        for si in (0..self.dec.len()).rev() {
            for blk in &self.dec[si] {
                let skip = skips.pop().expect("one skip per decoder block");
                h = cx.g.concat(&[h, skip], 1)?;
                h = blk.forward(cx, h, temb, ctxv, rec)?;
            }
            if si > 0 {
                h = cx.g.upsample_nearest(h, 2)?;
                h = self.up[si - 1].forward(cx, h)?;
            }
        }
        let h = self.out_norm.forward(cx, h)?;
        let h = cx.g.silu(h);
        self.out_conv.forward(cx, h)
    }

    /// Differentiable prediction for training; parameters bind through `cx`.
    pub fn forward_train(&self, cx: &mut Ctx<'_, T>, x: Var, timesteps: &[usize], ctx: &ConditioningContext<T>) -> Result<Var> {
        let req = TapRequest::none();
        let mut rec = Recorder { req: &req, features: Vec::new(), maps: Vec::new() };
        self.build(cx, x, timesteps, ctx, &mut rec)
    }

    /// Inference with per-sample timesteps.
    pub fn predict_batch(
        &self,
        x_t: &Tensor<T>,
        timesteps: &[usize],
        ctx: &ConditioningContext<T>,
        taps: &TapRequest,
    ) -> Result<(Tensor<T>, Captures<T>)> {
        self.check_input(x_t)?;
        taps.validate(&self.taps)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let x = cx.constant(x_t.clone());
        let mut rec = Recorder { req: taps, features: Vec::new(), maps: Vec::new() };
        let eps = self.build(&mut cx, x, timesteps, ctx, &mut rec)?;
        let mut caps = Captures::default();
        for (p, v) in rec.features {
            caps.features.push((p, g.value(v).clone()));
        }
        let heads = self.config.attention_heads;
        for (p, v) in rec.maps {
            caps.attention_maps.push((p, average_heads(g.value(v), heads)?));
        }
        caps.features.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((g.value(eps).clone(), caps))
    }
}

/// `(B * heads, N, M) -> (B, N, M)` mean over heads.
fn average_heads<T: Real>(p: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    if heads == 1 {
        return Ok(p.clone());
    }
    let s = p.shape();
    let (bh, n, m) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let inv = T::one() / T::of(heads as f64);
    let d = p.data();
    Tensor::from_vec(
        &[b, n, m],
        (0..b * n * m)
            .map(|i| {
                let (bi, r) = (i / (n * m), i % (n * m));
                (0..heads).map(|h| d[(bi * heads + h) * n * m + r]).sum::<T>() * inv
            })
            .collect(),
    )
}

impl<T: Real> Denoiser<T> for ToyUNet<T> {
    fn latent_geometry(&self) -> (usize, usize, usize) {
        let (h, w) = self.config.latent_size;
        (self.config.latent_channels, h, w)
    }

    fn num_scales(&self) -> usize {
        self.config.num_scales
    }

    fn tap_points(&self) -> Vec<TapPoint> {
        self.taps.clone()
    }

    fn predict(&self, x_t: &Tensor<T>, t: usize, ctx: &ConditioningContext<T>, taps: &TapRequest) -> Result<(Tensor<T>, Captures<T>)> {
        let b = self.check_input(x_t)?;
        self.predict_batch(x_t, &alloc::vec![t; b], ctx, taps)
    }

    fn checksum(&self) -> [u8; 32] {
        self.store.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            num_scales: 3,
            channels_per_scale: alloc::vec![8, 12, 16],
            blocks_per_scale: 1,
            attention_heads: 2,
            context_dim: 6,
            context_tokens: 3,
            latent_channels: 4,
            latent_size: (8, 8),
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = small();
        c.latent_size = (6, 8);
        assert!(c.validate().is_err());
        let mut c = small();
        c.channels_per_scale.pop();
        assert!(c.validate().is_err());
        let mut c = small();
        c.attention_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tap_inventory() {
        let c = small();
        let taps = c.tap_points();
        // encoder + decoder at every scale plus the mid block, three kinds each.
        assert_eq!(taps.len(), 3 * (2 * 3 + 1));
        assert!(taps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn predict_shapes_taps_and_determinism() {
        let cfg = small();
        let net = ToyUNet::<f64>::new(cfg.clone(), 7).unwrap();
        let ctx = ConditioningContext::random(3, 6, "ctx", 1);
        let x = Tensor::from_fn(&[2, 4, 8, 8], |i| libm::sin(i as f64));
        let (e0, caps) = net.predict(&x, 10, &ctx, &TapRequest::none()).unwrap();
        assert_eq!(e0.shape(), x.shape());
        assert!(caps.is_empty());
        let mut req = TapRequest::of(net.tap_points());
        let sa = TapPoint { scale: 2, block: 1, kind: ModuleKind::SelfAttention, half: Half::Decoder };
        req.attention_maps.insert(sa);
        let (e1, caps) = net.predict(&x, 10, &ctx, &req).unwrap();
        assert_eq!(e0.data(), e1.data());
        assert_eq!(caps.features.len(), net.tap_points().len());
        for (p, t) in &caps.features {
            let (h, w) = cfg.scale_size(p.scale);
            let c = cfg.channels(p.scale);
            match p.kind {
                ModuleKind::ResNet => assert_eq!(t.shape(), &[2, c, h, w]),
                _ => assert_eq!(t.shape(), &[2, h * w, c]),
            }
        }
        let map = &caps.attention_maps[0].1;
        assert_eq!(map.shape(), &[2, 16, 16]);
        for row in map.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_tap_rejected() {
        let net = ToyUNet::<f64>::new(small(), 7).unwrap();
        let ctx = ConditioningContext::random(3, 6, "ctx", 1);
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let bad = TapPoint { scale: 4, block: 0, kind: ModuleKind::ResNet, half: Half::Encoder };
        assert!(matches!(net.predict(&x, 1, &ctx, &TapRequest::of([bad])), Err(Error::Tap(_))));
    }

    #[test]
    fn context_changes_output() {
        let net = ToyUNet::<f64>::new(small(), 7).unwrap();
        let x = Tensor::from_fn(&[1, 4, 8, 8], |i| libm::cos(i as f64));
        let a = ConditioningContext::random(3, 6, "a", 1);
        let b = ConditioningContext::random(3, 6, "b", 2);
        let (ea, _) = net.predict(&x, 5, &a, &TapRequest::none()).unwrap();
        let (ea2, _) = net.predict(&x, 5, &a.clone(), &TapRequest::none()).unwrap();
        let (eb, _) = net.predict(&x, 5, &b, &TapRequest::none()).unwrap();
        assert_eq!(ea, ea2);
        assert!(ea.max_abs_diff(&eb) > 0.0);
    }
}
