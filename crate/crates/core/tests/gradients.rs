mod common;

use common::{random, store_grad_check};
use tapfuse_core::features::{FeatureKey, FeatureStack};
use tapfuse_core::fusion::{FeatureLayout, Fusion, FusionConfig, GateConfig, GatePooling, MoeConfig, Strategy};
use tapfuse_core::heads::{compute_loss, LinearHead, LossSpec, Targets, UperNet, UperNetConfig};
use tapfuse_core::nn::{Ctx, ParamStore};
use tapfuse_core::taps::ModuleKind;
use tapfuse_core::{Result, Tensor, Var};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn check(errors: &[(String, f64)], what: &str) {
    assert!(!errors.is_empty(), "{what}: no trainable parameters");
    for (name, e) in errors {
        assert!(*e < TOL, "{what}: {name} relative error {e}");
    }
}

/// Fixed random weighting so every output element reaches the loss.
fn reduce(cx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = cx.constant(random(cx.g.shape(y), seed));
    let p = cx.g.mul(y, w)?;
    Ok(cx.g.sum(p))
}

fn stack() -> FeatureStack<f64> {
    let mut s = FeatureStack::new();
    for t in [1, 50] {
        for (i, kind) in [ModuleKind::ResNet, ModuleKind::SelfAttention].into_iter().enumerate() {
            let key = FeatureKey { scale: 1, timestep: t, block: 1, kind };
            s.insert(key, random(&[2, 2 + i, 3, 3], (t + i) as u64)).unwrap();
        }
    }
    s
}

fn fusion_check(cfg: FusionConfig, what: &str) {
    let s = stack();
    let mut store = ParamStore::new();
    let f = Fusion::new(&mut store, FeatureLayout::of(&s).unwrap(), &cfg, &mut tapfuse_core::rng(17)).unwrap();
    assert!(store.num_scalars() <= 1000, "{what}: {} parameters", store.num_scalars());
    let errors = store_grad_check(&store, STEP, |cx| {
        let out = f.forward(cx, &s)?;
        let mut loss = reduce(cx, out.pyramid[0], 5)?;
        if let Some(aux) = out.aux_loss {
            loss = cx.g.add(loss, aux)?;
        }
        Ok(loss)
    });
    check(&errors, what);
}

#[test]
fn global_fusion_gradients() {
    fusion_check(FusionConfig { strategy: Strategy::Global, d_out: vec![3], ..Default::default() }, "global");
    fusion_check(
        FusionConfig { strategy: Strategy::Global, d_out: vec![3], projection_activation: true, ..Default::default() },
        "global+gelu",
    );
}

#[test]
fn localized_fusion_gradients() {
    let gate = GateConfig { hidden: 3, kernel: 3, depth: 2 };
    fusion_check(FusionConfig { strategy: Strategy::Localized, d_out: vec![3], gate, ..Default::default() }, "localized");
}

#[test]
fn moe_fusion_gradients() {
    for pooling in [GatePooling::GlobalAverage, GatePooling::PerPixel] {
        let moe = MoeConfig { num_experts: 3, top_k: 2, hidden_mult: 1, pooling, load_balance: 0.1 };
        fusion_check(FusionConfig { strategy: Strategy::Moe, d_out: vec![2], moe, ..Default::default() }, "moe");
    }
}

fn pyramid(cx: &mut Ctx<'_, f64>, levels: &[(usize, usize)]) -> Vec<Var> {
    levels.iter().enumerate().map(|(i, &(c, s))| cx.constant(random(&[2, c, s, s], 40 + i as u64))).collect()
}

#[test]
fn linear_head_gradients() {
    let levels = [(3, 4), (2, 2)];
    let mut store = ParamStore::new();
    let head = LinearHead::new(&mut store, &[3, 2], 3, &mut tapfuse_core::rng(1)).unwrap();
    let errors = store_grad_check(&store, STEP, |cx| {
        let p = pyramid(cx, &levels);
        let logits = head.forward(cx, &p)?;
        compute_loss(cx, logits, &Targets::Classes(vec![2, 0]), &LossSpec::cross_entropy())
    });
    check(&errors, "linear head");
    let errors = store_grad_check(&store, STEP, |cx| {
        let p = pyramid(cx, &levels);
        let logits = head.forward(cx, &p)?;
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
        compute_loss(cx, logits, &Targets::MultiLabel(t), &LossSpec::binary())
    });
    check(&errors, "linear head bce");
}

#[test]
fn decoder_head_gradients() {
    let levels = [(2, 4), (3, 2), (2, 1)];
    let mut store = ParamStore::new();
    let cfg = UperNetConfig { fpn_channels: 3, ppm_bins: vec![1, 2, 3, 6] };
    let head = UperNet::new(&mut store, &[2, 3, 2], 3, cfg, &mut tapfuse_core::rng(2)).unwrap();
    assert!(store.num_scalars() <= 1000, "{} parameters", store.num_scalars());
    // Zero-initialised norm shifts put pooled 1x1 maps exactly on the ReLU
    // kink; check at a generic point instead.
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).name.contains(".norm.")).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&shape, 500 + i as u64);
    }
    let targets: Vec<usize> = (0..2 * 8 * 8).map(|i| (i * 7 / 5) % 3).collect();
    let spec = LossSpec { ignore_index: Some(2), ..LossSpec::cross_entropy() };
    let errors = store_grad_check(&store, STEP, |cx| {
        let p = pyramid(cx, &levels);
        let logits = head.forward(cx, &p, (8, 8))?;
        compute_loss(cx, logits, &Targets::Masks(targets.clone()), &spec)
    });
    check(&errors, "decoder head");
}
