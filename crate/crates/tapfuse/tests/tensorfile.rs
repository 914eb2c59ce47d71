use std::collections::BTreeMap;

use proptest::prelude::*;
use tapfuse::tensorfile::{self, Precision};
use tapfuse::Error;
use tapfuse_core::features::{FeatureKey, FeatureStack};
use tapfuse_core::taps::ModuleKind;
use tapfuse_core::Tensor;

fn stack(seed: u64) -> FeatureStack<f32> {
    let mut s = FeatureStack::new();
    let mut x = seed | 1;
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x % 20_000) as f32 / 997.0 - 10.0
    };
    for (t, scale, kind) in [(1, 1, ModuleKind::ResNet), (1, 2, ModuleKind::SelfAttention), (100, 1, ModuleKind::ResNet)] {
        let shape = [2, 3, 8 >> (scale - 1), 8 >> (scale - 1)];
        let n = shape.iter().product();
        let key = FeatureKey { scale, timestep: t, block: 4, kind };
        s.insert(key, Tensor::from_vec(&shape, (0..n).map(|_| next()).collect()).unwrap()).unwrap();
    }
    s
}

#[test]
fn f32_dump_reloads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.safetensors");
    let s = stack(11);
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), "x".to_string());
    tensorfile::dump_stack(&p, &s, Precision::F32, meta).unwrap();
    let (back, m) = tensorfile::load_stack::<f32>(&p).unwrap();
    assert_eq!(m["note"], "x");
    assert_eq!(m["precision"], "f32");
    for ((ka, a), (kb, b)) in s.iter().zip(back.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn f16_dump_is_idempotent_after_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
    tensorfile::dump_stack(&p, &stack(5), Precision::F16, BTreeMap::new()).unwrap();
    let (once, _) = tensorfile::load_stack::<f32>(&p).unwrap();
    tensorfile::dump_stack(&q, &once, Precision::F16, BTreeMap::new()).unwrap();
    let (twice, _) = tensorfile::load_stack::<f32>(&q).unwrap();
    assert_eq!(once, twice);
    for ((_, a), (_, b)) in stack(5).iter().zip(once.iter()) {
        // Half precision keeps 11 significant bits.
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= x.abs() / 2048.0 + 1e-7));
    }
}

#[test]
fn truncated_file_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.safetensors");
    tensorfile::dump_stack(&p, &stack(2), Precision::F32, BTreeMap::new()).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    for cut in [4, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(tensorfile::load_stack::<f32>(&p), Err(Error::Corrupt { .. })), "cut at {cut}");
    }
}

#[test]
fn other_format_or_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.safetensors");
    let t = Tensor::<f32>::zeros(&[2]);
    tensorfile::write(&p, tensorfile::PARAMS_FORMAT, &[("w".into(), &t)], Precision::F32, BTreeMap::new()).unwrap();
    assert!(matches!(tensorfile::load_stack::<f32>(&p), Err(Error::Corrupt { .. })));
    // A later format version.
    let mut bytes = std::fs::read(&p).unwrap();
    let pat = b"\"version\":\"1\"";
    let at = bytes.windows(pat.len()).position(|w| w == pat).unwrap();
    bytes[at + pat.len() - 2] = b'9';
    std::fs::write(&p, &bytes).unwrap();
    let r = tensorfile::read::<f32>(&p, tensorfile::PARAMS_FORMAT);
    assert!(matches!(r, Err(Error::Version { .. })), "{:?}", r.err());
}

#[test]
fn empty_stack_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.safetensors");
    tensorfile::dump_stack(&p, &FeatureStack::<f32>::new(), Precision::F16, BTreeMap::new()).unwrap();
    let (back, _) = tensorfile::load_stack::<f32>(&p).unwrap();
    assert!(back.is_empty());
}

proptest! {
    #[test]
    fn precision_names_parse_back(p in prop_oneof![Just(Precision::F16), Just(Precision::F32), Just(Precision::F64)]) {
        prop_assert_eq!(p.to_string().parse::<Precision>().unwrap(), p);
    }

    #[test]
    fn f64_round_trip_is_exact(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.safetensors");
        let t = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
        tensorfile::write(&p, "t", &[("v".into(), &t)], Precision::F64, BTreeMap::new()).unwrap();
        let back = tensorfile::read::<f64>(&p, "t").unwrap();
        prop_assert_eq!(back.tensors[0].1.data(), &vals[..]);
    }
}
