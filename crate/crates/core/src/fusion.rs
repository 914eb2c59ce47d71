//! Per-scale fusion of multi-timestep, multi-module features into a pyramid.
//!
//! Within a scale, features are enumerated timestep-major and then by
//! `(block, kind)`; index `i = t_index * L + l` where `L` is the number of
//! modules at that scale.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{FeatureKey, FeatureStack};
use crate::nn::{Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::taps::ModuleKind;
use crate::tensor::Tensor;
use crate::{Rng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Global,
    Localized,
    Moe,
    /// Channel concatenation without learnable state.
    Concat,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Global => "global",
            Strategy::Localized => "localized",
            Strategy::Moe => "moe",
            Strategy::Concat => "concat",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(Strategy::Global),
            "localized" | "local" => Ok(Strategy::Localized),
            "moe" => Ok(Strategy::Moe),
            "concat" | "simple_concat" | "raw" => Ok(Strategy::Concat),
            _ => Err(Error::Config(format!("unknown fusion strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePooling {
    /// One routing decision per sample from globally pooled features.
    GlobalAverage,
    /// One routing decision per pixel.
    PerPixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Expert hidden width as a multiple of the output width.
    pub hidden_mult: usize,
    pub pooling: GatePooling,
    pub load_balance: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig { num_experts: 8, top_k: 2, hidden_mult: 2, pooling: GatePooling::GlobalAverage, load_balance: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateConfig {
    pub hidden: usize,
    pub kernel: usize,
    /// Number of convolutions, at least 1.
    pub depth: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { hidden: 32, kernel: 3, depth: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Output channels per scale, finest first.
    pub d_out: Vec<usize>,
    pub projection_activation: bool,
    pub gate: GateConfig,
    pub moe: MoeConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Global,
            d_out: alloc::vec![64, 96, 128, 160],
            projection_activation: false,
            gate: GateConfig::default(),
            moe: MoeConfig::default(),
        }
    }
}

/// Feature grid at one scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleLayout {
    pub scale: usize,
    pub size: (usize, usize),
    pub timesteps: Vec<usize>,
    /// `(block, kind, channels)` in enumeration order.
    pub modules: Vec<(usize, ModuleKind, usize)>,
}

impl ScaleLayout {
    pub fn len(&self) -> usize {
        self.timesteps.len() * self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channels of one timestep's concatenated features.
    pub fn concat_channels(&self) -> usize {
        self.modules.iter().map(|m| m.2).sum()
    }

    pub fn key(&self, t_index: usize, l: usize) -> FeatureKey {
        let (block, kind, _) = self.modules[l];
        FeatureKey { scale: self.scale, timestep: self.timesteps[t_index], block, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub scales: Vec<ScaleLayout>,
}

impl FeatureLayout {
    /// Layout of `stack`; every scale must hold a full timestep x module grid.
    pub fn of<T: Real>(stack: &FeatureStack<T>) -> Result<Self> {
        if stack.is_empty() {
            return Err(Error::Empty("feature stack".into()));
        }
        let mut scales = Vec::new();
        for (scale, group) in stack.group_by_scale() {
            let mut timesteps: Vec<usize> = group.iter().map(|(k, _)| k.timestep).collect();
            timesteps.dedup();
            let t0 = timesteps[0];
            let modules: Vec<(usize, ModuleKind, usize)> =
                group.iter().filter(|(k, _)| k.timestep == t0).map(|(k, v)| (k.block, k.kind, v.shape()[1])).collect();
            let size = (group[0].1.shape()[2], group[0].1.shape()[3]);
            let layout = ScaleLayout { scale, size, timesteps, modules };
            if group.len() != layout.len() {
                return Err(Error::Shape(format!("scale {scale} does not hold a full timestep x module grid")));
            }
            for (i, (k, v)) in group.iter().enumerate() {
                let want = layout.key(i / layout.modules.len(), i % layout.modules.len());
                if *k != want || v.shape()[1] != layout.modules[i % layout.modules.len()].2 {
                    return Err(Error::Shape(format!("feature {k} breaks the grid layout at scale {scale}")));
                }
            }
            scales.push(layout);
        }
        Ok(FeatureLayout { scales })
    }
}

/// Per-pixel channel map, optionally followed by GELU.
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: Conv2d,
    pub activation: bool,
}

impl Projection {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        Ok(if self.activation { cx.g.gelu(y) } else { y })
    }
}

/// Convolution stack producing one logit map per fused feature.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub layers: Vec<Conv2d>,
}

impl GateNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, outputs: usize, cfg: &GateConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.depth == 0 || cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!("gate needs depth >= 1 and an odd kernel, got {cfg:?}")));
        }
        let mut layers = Vec::new();
        let mut c = cin;
        for i in 0..cfg.depth {
            let out = if i + 1 == cfg.depth { outputs } else { cfg.hidden };
            layers.push(Conv2d::new(store, &format!("{name}.conv{i}"), c, out, cfg.kernel, 1, cfg.kernel / 2, rng));
            c = out;
        }
        Ok(GateNet { layers })
    }

    pub fn outputs<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.layers.last().expect("nonempty").w).shape()[0]
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = cx.g.silu(h);
            }
            h = l.forward(cx, h)?;
        }
        Ok(h)
    }
}

/// Two-layer per-pixel MLP.
#[derive(Debug, Clone)]
pub struct Expert {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Expert {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }
}

#[derive(Debug, Clone)]
pub enum Router {
    Pooled(Linear),
    PerPixel(Conv2d),
}

#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    pub router: Router,
    pub top_k: usize,
    pub load_balance: f64,
}

/// Result of routing one input through an expert bank.
pub struct MoeOutput {
    pub output: Var,
    /// Kept, renormalised gates: `(B, E)` or `(B, E, h, w)`.
    pub gates: Var,
    /// Load-balancing penalty, already multiplied by its coefficient.
    pub aux_loss: Option<Var>,
}

impl ExpertBank {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &MoeConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.num_experts == 0 || cfg.top_k == 0 || cfg.top_k > cfg.num_experts {
            return Err(Error::Config(format!("top_k = {} must lie in [1, {}]", cfg.top_k, cfg.num_experts)));
        }
        let hidden = cfg.hidden_mult.max(1) * cout;
        let experts = (0..cfg.num_experts)
            .map(|e| Expert {
                fc1: Conv2d::pointwise(store, &format!("{name}.expert{e}.fc1"), cin, hidden, rng),
                fc2: Conv2d::pointwise(store, &format!("{name}.expert{e}.fc2"), hidden, cout, rng),
            })
            .collect();
        let router = match cfg.pooling {
            GatePooling::GlobalAverage => Router::Pooled(Linear::new(store, &format!("{name}.router"), cin, cfg.num_experts, true, rng)),
            GatePooling::PerPixel => Router::PerPixel(Conv2d::pointwise(store, &format!("{name}.router"), cin, cfg.num_experts, rng)),
        };
        Ok(ExpertBank { experts, router, top_k: cfg.top_k, load_balance: cfg.load_balance })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Router logits: `(B, E)` for pooled routing, `(B, h, w, E)` per pixel.
    pub fn logits<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.router {
            Router::Pooled(fc) => {
                let p = cx.g.spatial_mean(x)?;
                fc.forward(cx, p)
            }
            Router::PerPixel(conv) => {
                let l = conv.forward(cx, x)?;
                cx.g.permute(l, &[0, 2, 3, 1])
            }
        }
    }

    /// Every expert evaluated densely, for inspection.
    pub fn expert_outputs<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(cx, x)).collect()
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<MoeOutput> {
        let logits = self.logits(cx, x)?;
        let gates = cx.g.topk_softmax(logits, self.top_k)?;
        let e_count = self.experts.len();
        let aux_loss = if self.load_balance > 0.0 { Some(self.balance_loss(cx, logits, gates)?) } else { None };
        match self.router {
            Router::Pooled(_) => {
                let b = cx.g.shape(x)[0];
                let gv = cx.g.value(gates).clone();
                let mut parts = Vec::new();
                for (e, expert) in self.experts.iter().enumerate() {
                    let rows: Vec<usize> = (0..b).filter(|&r| gv.data()[r * e_count + e] != T::zero()).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = cx.g.gather_rows(x, &rows)?;
                    let ye = expert.forward(cx, xe)?;
                    let ge = cx.g.gather_rows(gates, &rows)?;
                    let ge = cx.g.narrow(ge, 1, e, 1)?;
                    let ge = cx.g.reshape(ge, &[rows.len(), 1, 1, 1])?;
                    let ye = cx.g.mul(ye, ge)?;
                    parts.push(cx.g.scatter_rows(ye, &rows, b)?);
                }
                let output = cx.g.add_all(&parts)?;
                Ok(MoeOutput { output, gates, aux_loss })
            }
            Router::PerPixel(_) => {
                let gates = cx.g.permute(gates, &[0, 3, 1, 2])?;
                let mut parts = Vec::new();
                for (e, expert) in self.experts.iter().enumerate() {
                    let ye = expert.forward(cx, x)?;
                    let ge = cx.g.narrow(gates, 1, e, 1)?;
                    parts.push(cx.g.mul(ye, ge)?);
                }
                let output = cx.g.add_all(&parts)?;
                Ok(MoeOutput { output, gates, aux_loss })
            }
        }
    }

    /// `coef * E * sum_e f_e * P_e` with `f_e` the fraction of routing slots
    /// given to expert `e` and `P_e` its mean router probability.
    fn balance_loss<T: Real>(&self, cx: &mut Ctx<'_, T>, logits: Var, gates: Var) -> Result<Var> {
        let shape = cx.g.shape(logits).to_vec();
        let e = *shape.last().expect("nonempty");
        let rows = crate::tensor::numel(&shape) / e;
        let axis = shape.len() - 1;
        let probs = cx.g.softmax(logits, axis)?;
        let gv = cx.g.value(gates).clone();
        let mut frac = alloc::vec![T::zero(); e];
        for row in gv.data().chunks(e) {
            for (f, g) in frac.iter_mut().zip(row) {
                if *g != T::zero() {
                    *f += T::one();
                }
            }
        }
        let denom = T::of((rows * self.top_k) as f64);
        frac.iter_mut().for_each(|f| *f /= denom);
        let mut fshape = alloc::vec![1; shape.len()];
        fshape[axis] = e;
        let f = cx.constant(Tensor::from_vec(&fshape, frac)?);
        let weighted = cx.g.mul(probs, f)?;
        let s = cx.g.sum(weighted);
        Ok(cx.g.scale(s, T::of(self.load_balance * e as f64 / rows as f64)))
    }
}

/// `X = sum_t sum_l w[l, t] * proj_l(F_{t,l})` with `features` in
/// enumeration order and `weights` of shape `(L, T)`.
pub fn global_fuse<T: Real>(cx: &mut Ctx<'_, T>, features: &[Var], proj: &[Projection], weights: Var) -> Result<Var> {
    let ws = cx.g.shape(weights).to_vec();
    let l_count = proj.len();
    if ws.len() != 2 || ws[0] != l_count || ws[0] * ws[1] != features.len() {
        return Err(Error::Shape(format!("weights {ws:?} do not match {} features over {l_count} modules", features.len())));
    }
    let mut parts = Vec::with_capacity(features.len());
    for (i, &f) in features.iter().enumerate() {
        let (t, l) = (i / l_count, i % l_count);
        let p = proj[l].forward(cx, f)?;
        let w = cx.g.narrow(weights, 0, l, 1)?;
        let w = cx.g.narrow(w, 1, t, 1)?;
        let w = cx.g.reshape(w, &[1, 1, 1, 1])?;
        parts.push(cx.g.mul(p, w)?);
    }
    cx.g.add_all(&parts)
}

/// Pixel-wise softmax-weighted sum of projected features. Returns the fused
/// map and the weights `(B, K, h, w)`.
pub fn localized_fuse<T: Real>(cx: &mut Ctx<'_, T>, features: &[Var], proj: &[Projection], gate: &GateNet) -> Result<(Var, Var)> {
    let l_count = proj.len();
    if l_count == 0 || features.len() % l_count != 0 {
        return Err(Error::Shape(format!("{} features over {l_count} modules", features.len())));
    }
    let projected: Vec<Var> = features.iter().enumerate().map(|(i, &f)| proj[i % l_count].forward(cx, f)).collect::<Result<_>>()?;
    let sum = cx.g.add_all(&projected)?;
    let reference = cx.g.scale(sum, T::one() / T::of(projected.len() as f64));
    let logits = gate.forward(cx, reference)?;
    if cx.g.shape(logits)[1] != projected.len() {
        return Err(Error::Shape(format!("gate emits {} maps for {} features", cx.g.shape(logits)[1], projected.len())));
    }
    let weights = cx.g.softmax(logits, 1)?;
    let fused = weighted_sum(cx, &projected, weights)?;
    Ok((fused, weights))
}

/// `sum_i weights[:, i] * parts[i]` for per-pixel weights `(B, K, h, w)`.
pub fn weighted_sum<T: Real>(cx: &mut Ctx<'_, T>, parts: &[Var], weights: Var) -> Result<Var> {
    let mut out = Vec::with_capacity(parts.len());
    for (i, &p) in parts.iter().enumerate() {
        let w = cx.g.narrow(weights, 1, i, 1)?;
        out.push(cx.g.mul(p, w)?);
    }
    cx.g.add_all(&out)
}

/// Per timestep: concatenate module features, route through the shared
/// bank; sum the results over timesteps. `per_timestep[t]` lists that
/// timestep's features in module order.
pub fn moe_fuse<T: Real>(cx: &mut Ctx<'_, T>, per_timestep: &[Vec<Var>], bank: &ExpertBank) -> Result<(Var, Vec<MoeOutput>)> {
    let mut outs = Vec::with_capacity(per_timestep.len());
    for feats in per_timestep {
        let x = cx.g.concat(feats, 1)?;
        outs.push(bank.forward(cx, x)?);
    }
    let ys: Vec<Var> = outs.iter().map(|o| o.output).collect();
    Ok((cx.g.add_all(&ys)?, outs))
}

/// Channel concatenation in enumeration order.
pub fn simple_concat<T: Real>(cx: &mut Ctx<'_, T>, features: &[Var]) -> Result<Var> {
    cx.g.concat(features, 1)
}

#[derive(Debug, Clone)]
pub enum ScaleFusion {
    Global { proj: Vec<Projection>, weights: ParamId },
    Localized { proj: Vec<Projection>, gate: GateNet },
    Moe { bank: ExpertBank },
    Concat,
}

/// Learnable fusion state for every scale of a layout.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub strategy: Strategy,
    pub layout: FeatureLayout,
    pub scales: Vec<ScaleFusion>,
    out_channels: Vec<usize>,
}

/// Graph outputs of a fusion pass.
pub struct FusionOutput {
    pub pyramid: Vec<Var>,
    /// Localized fusion: per-scale pixel weights.
    pub weight_maps: Vec<Option<Var>>,
    /// MoE: per-scale, per-timestep gates.
    pub gates: Vec<Vec<Var>>,
    pub aux_loss: Option<Var>,
}

impl Fusion {
    pub fn new<T: Real>(store: &mut ParamStore<T>, layout: FeatureLayout, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let strategy = cfg.strategy;
        let ns = format!("fusion.{}", strategy.name());
        let mut scales = Vec::new();
        let mut out_channels = Vec::new();
        for sl in &layout.scales {
            let s = sl.scale;
            let d_out = if strategy == Strategy::Concat {
                sl.concat_channels() * sl.timesteps.len()
            } else {
                *cfg.d_out.get(s - 1).ok_or_else(|| Error::Config(format!("d_out has no entry for scale {s}")))?
            };
            let proj = |store: &mut ParamStore<T>, rng: &mut Rng| -> Vec<Projection> {
                sl.modules
                    .iter()
                    .enumerate()
                    .map(|(l, m)| Projection {
                        conv: Conv2d::pointwise(store, &format!("{ns}.s{s}.proj{l}"), m.2, d_out, rng),
                        activation: cfg.projection_activation,
                    })
                    .collect()
            };
            let f = match strategy {
                Strategy::Global => {
                    let p = proj(store, rng);
                    let (l, t) = (sl.modules.len(), sl.timesteps.len());
                    let w = store.add(format!("{ns}.s{s}.weights"), Tensor::full(&[l, t], T::of(1.0 / (l * t) as f64)));
                    ScaleFusion::Global { proj: p, weights: w }
                }
                Strategy::Localized => {
                    let p = proj(store, rng);
                    let gate = GateNet::new(store, &format!("{ns}.s{s}.gate"), d_out, sl.len(), &cfg.gate, rng)?;
                    ScaleFusion::Localized { proj: p, gate }
                }
                Strategy::Moe => ScaleFusion::Moe {
                    bank: ExpertBank::new(store, &format!("{ns}.s{s}"), sl.concat_channels(), d_out, &cfg.moe, rng)?,
                },
                Strategy::Concat => ScaleFusion::Concat,
            };
            scales.push(f);
            out_channels.push(d_out);
        }
        Ok(Fusion { strategy, layout, scales, out_channels })
    }

    /// Channels of each pyramid level, finest first.
    pub fn out_channels(&self) -> &[usize] {
        &self.out_channels
    }

    /// Bind the stack's features as graph constants in enumeration order.
    pub fn inputs<T: Real>(&self, cx: &mut Ctx<'_, T>, stack: &FeatureStack<T>) -> Result<Vec<Vec<Var>>> {
        let mut out = Vec::with_capacity(self.layout.scales.len());
        for sl in &self.layout.scales {
            let mut v = Vec::with_capacity(sl.len());
            for i in 0..sl.len() {
                let key = sl.key(i / sl.modules.len(), i % sl.modules.len());
                let t = stack.get(&key).ok_or_else(|| Error::Shape(format!("stack is missing feature {key}")))?;
                if t.shape()[1] != sl.modules[i % sl.modules.len()].2 {
                    return Err(Error::Shape(format!("feature {key} has {} channels", t.shape()[1])));
                }
                v.push(cx.constant(t.clone()));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, stack: &FeatureStack<T>) -> Result<FusionOutput> {
        let inputs = self.inputs(cx, stack)?;
        self.forward_vars(cx, &inputs)
    }

    /// Fuse already-bound features, one enumeration-ordered list per scale.
    pub fn forward_vars<T: Real>(&self, cx: &mut Ctx<'_, T>, inputs: &[Vec<Var>]) -> Result<FusionOutput> {
        if inputs.len() != self.scales.len() {
            return Err(Error::Shape(format!("{} scale groups for {} fusion scales", inputs.len(), self.scales.len())));
        }
        let mut pyramid = Vec::new();
        let mut weight_maps = Vec::new();
        let mut gates = Vec::new();
        let mut aux = Vec::new();
        for ((f, sl), feats) in self.scales.iter().zip(&self.layout.scales).zip(inputs) {
            let (x, wm, g) = match f {
                ScaleFusion::Global { proj, weights } => {
                    let w = cx.param(*weights);
                    (global_fuse(cx, feats, proj, w)?, None, Vec::new())
                }
                ScaleFusion::Localized { proj, gate } => {
                    let (x, w) = localized_fuse(cx, feats, proj, gate)?;
                    (x, Some(w), Vec::new())
                }
                ScaleFusion::Moe { bank } => {
                    let per_t: Vec<Vec<Var>> = feats.chunks(sl.modules.len()).map(|c| c.to_vec()).collect();
                    let (x, outs) = moe_fuse(cx, &per_t, bank)?;
                    aux.extend(outs.iter().filter_map(|o| o.aux_loss));
                    (x, None, outs.iter().map(|o| o.gates).collect())
                }
                ScaleFusion::Concat => (simple_concat(cx, feats)?, None, Vec::new()),
            };
            pyramid.push(x);
            weight_maps.push(wm);
            gates.push(g);
        }
        let aux_loss = if aux.is_empty() { None } else { Some(cx.g.add_all(&aux)?) };
        Ok(FusionOutput { pyramid, weight_maps, gates, aux_loss })
    }

    /// Learned global weights of every scale as `(L, T)` matrices.
    pub fn global_weights<T: Real>(&self, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        self.scales
            .iter()
            .map(|f| match f {
                ScaleFusion::Global { weights, .. } => Ok(store.get(*weights).clone()),
                _ => Err(Error::Config(format!("{} fusion has no global weights", self.strategy.name()))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(t: &[usize], scales: &[(usize, usize)]) -> FeatureStack<f64> {
        let mut s = FeatureStack::new();
        for &ts in t {
            for (si, &(c, hw)) in scales.iter().enumerate() {
                for kind in [ModuleKind::ResNet, ModuleKind::SelfAttention] {
                    let key = FeatureKey { scale: si + 1, timestep: ts, block: 1, kind };
                    s.insert(key, Tensor::from_fn(&[2, c, hw, hw], |i| (i as f64 * 0.37).sin())).unwrap();
                }
            }
        }
        s
    }

    #[test]
    fn layout_from_stack() {
        let s = stack(&[1, 50], &[(3, 4), (5, 2)]);
        let l = FeatureLayout::of(&s).unwrap();
        assert_eq!(l.scales.len(), 2);
        assert_eq!(l.scales[0].timesteps, [1, 50]);
        assert_eq!(l.scales[1].modules, [(1, ModuleKind::ResNet, 5), (1, ModuleKind::SelfAttention, 5)]);
        assert_eq!(l.scales[1].size, (2, 2));
        let partial = s.filter(|k| !(k.timestep == 50 && k.kind == ModuleKind::ResNet && k.scale == 1));
        assert!(FeatureLayout::of(&partial).is_err());
    }

    #[test]
    fn channel_bookkeeping() {
        let s = stack(&[1, 50], &[(3, 4), (5, 2)]);
        let layout = FeatureLayout::of(&s).unwrap();
        let mut rng = crate::rng(0);
        for (strategy, want) in [(Strategy::Global, [7, 9]), (Strategy::Concat, [12, 20]), (Strategy::Moe, [7, 9])] {
            let mut store = ParamStore::<f64>::new();
            let cfg = FusionConfig { strategy, d_out: alloc::vec![7, 9], ..Default::default() };
            let f = Fusion::new(&mut store, layout.clone(), &cfg, &mut rng).unwrap();
            assert_eq!(f.out_channels(), want);
            let mut g = crate::Graph::new();
            let mut cx = Ctx::new(&mut g, &store, true);
            let out = f.forward(&mut cx, &s).unwrap();
            for (v, (c, hw)) in out.pyramid.iter().zip([(want[0], 4), (want[1], 2)]) {
                assert_eq!(cx.g.shape(*v), &[2, c, hw, hw]);
            }
        }
    }

    #[test]
    fn bad_top_k_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cfg = MoeConfig { num_experts: 2, top_k: 3, ..Default::default() };
        assert!(ExpertBank::new(&mut store, "b", 4, 4, &cfg, &mut crate::rng(0)).is_err());
    }
}
