use tapfuse_core::diffusion::{ConditioningContext, Denoiser, DenoiserConfig, LatentCodec, NoiseSchedule, ToyUNet};
use tapfuse_core::features::{default_plan, extract, extract_batched, Backbone, ExtractionPlan, HalfSelection, Selector};
use tapfuse_core::taps::{Half, ModuleKind};
use tapfuse_core::Tensor;

fn net() -> ToyUNet<f64> {
    let cfg = DenoiserConfig {
        num_scales: 4,
        channels_per_scale: vec![4, 8, 8, 8],
        blocks_per_scale: 1,
        attention_heads: 2,
        context_dim: 4,
        context_tokens: 2,
        latent_channels: 3,
        latent_size: (8, 8),
    };
    ToyUNet::new(cfg, 5).unwrap()
}

fn images(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, 8, 8], |i| ((i * 7919) % 101) as f64 / 100.0)
}

fn fast_plan() -> ExtractionPlan {
    ExtractionPlan { inversion_stride: 50, ..default_plan() }
}

#[test]
fn default_plan_cardinality_and_shapes() {
    let unet = net();
    let (codec, sched, ctx) = (LatentCodec::Identity, NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), ConditioningContext::random(2, 4, "c", 1));
    let bb = Backbone { denoiser: &unet, codec: &codec, schedule: &sched, context: &ctx };
    let plan = fast_plan();
    let stack = extract(&images(2), &plan, &bb).unwrap();
    // Oracle from tap introspection: decoder taps of the selected kinds, per timestep.
    let per_t = unet
        .tap_points()
        .iter()
        .filter(|p| p.half == Half::Decoder && matches!(p.kind, ModuleKind::ResNet | ModuleKind::SelfAttention))
        .count();
    assert_eq!(stack.len(), per_t * plan.timesteps.len());
    assert_eq!(stack.len(), 24);
    for (k, v) in stack.iter() {
        let side = 8 >> (k.scale - 1);
        assert_eq!(v.shape(), &[2, unet.config.channels(k.scale), side, side], "{k}");
        assert!(v.is_finite());
    }
    assert_eq!(stack.timesteps(), [1, 100, 200]);
    assert_eq!(stack.scales(), [1, 2, 3, 4]);
}

#[test]
fn extraction_is_deterministic_and_leaves_backbone_untouched() {
    let unet = net();
    let before = unet.checksum();
    let (codec, sched, ctx) = (LatentCodec::Identity, NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), ConditioningContext::random(2, 4, "c", 1));
    let bb = Backbone { denoiser: &unet, codec: &codec, schedule: &sched, context: &ctx };
    let x = images(3);
    let a = extract(&x, &fast_plan(), &bb).unwrap();
    let b = extract_batched(&x, &fast_plan(), &bb, 2).unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for ((_, u), (_, v)) in a.iter().zip(b.iter()) {
        assert!(u.max_abs_diff(v) < 1e-12);
    }
    let c = extract(&x, &fast_plan(), &bb).unwrap();
    assert!(a.iter().zip(c.iter()).all(|((_, u), (_, v))| u == v));
    assert_eq!(before, unet.checksum());
}

#[test]
fn plan_selection_variants() {
    let unet = net();
    let (codec, sched, ctx) = (LatentCodec::Identity, NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), ConditioningContext::random(2, 4, "c", 1));
    let bb = Backbone { denoiser: &unet, codec: &codec, schedule: &sched, context: &ctx };
    let plan = ExtractionPlan {
        timesteps: vec![10],
        selectors: vec![Selector::all(ModuleKind::CrossAttention)],
        scales: vec![2, 3],
        half: HalfSelection::Both,
        include_mid: false,
        inversion_stride: 5,
    };
    let stack = extract(&images(1), &plan, &bb).unwrap();
    assert_eq!(stack.len(), 4);
    assert!(stack.keys().all(|k| k.kind == ModuleKind::CrossAttention));
    let bad = ExtractionPlan { scales: vec![7], ..plan.clone() };
    assert!(extract(&images(1), &bad, &bb).is_err());
    let bad = ExtractionPlan { timesteps: vec![], ..plan };
    assert!(extract(&images(1), &bad, &bb).is_err());
}

#[test]
fn geometry_mismatch_is_rejected() {
    let unet = net();
    let (codec, sched, ctx) = (LatentCodec::Identity, NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), ConditioningContext::random(2, 4, "c", 1));
    let bb = Backbone { denoiser: &unet, codec: &codec, schedule: &sched, context: &ctx };
    assert!(extract(&Tensor::zeros(&[1, 3, 16, 16]), &fast_plan(), &bb).is_err());
}
