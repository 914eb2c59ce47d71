use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use tapfuse::datasets::{self, decode_mask, encode_mask, load_folder_dataset, load_splits, write_dataset, Manifest, RecordLabel, SampleLabel};
use tapfuse::Error;
use tapfuse_core::data::{generate_shapes_classification, generate_shapes_segmentation, rgb_bands, Labels, SyntheticSpec};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { train: 6, val: 3, test: 2, image_size: 12, num_classes: 4, small_fraction: 0.5, noise: 0.05, seed }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for split in datasets::SPLITS {
        let d = root.join(split);
        if let Ok(rd) = std::fs::read_dir(&d) {
            for e in rd {
                let p = e.unwrap().path();
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    out.insert("manifest".into(), std::fs::read(root.join(datasets::MANIFEST)).unwrap());
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = spec(3);
    write_dataset(a.path(), &generate_shapes_segmentation::<f64>(&s).unwrap(), None).unwrap();
    write_dataset(b.path(), &generate_shapes_segmentation::<f64>(&s).unwrap(), None).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 2 * (6 + 3 + 2) + 1);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    write_dataset(c.path(), &generate_shapes_segmentation::<f64>(&spec(4)).unwrap(), None).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn manifest_histogram_matches_recount_of_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), &generate_shapes_segmentation::<f64>(&spec(1)).unwrap(), None).unwrap();
    for split in datasets::SPLITS {
        let mut counts = vec![0u64; m.num_classes];
        for r in m.records.iter().filter(|r| r.split == split) {
            let RecordLabel::Mask(rel) = &r.label else { panic!("segmentation record without mask") };
            let bytes = std::fs::read(dir.path().join(rel)).unwrap();
            let (mask, _, _) = decode_mask(&bytes, Path::new(rel)).unwrap();
            for v in mask {
                counts[v] += 1;
            }
        }
        assert_eq!(m.class_counts[split], counts, "{split}");
    }
    assert_eq!(Manifest::load(dir.path()).unwrap(), m);
}

#[test]
fn folder_round_trip_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let splits = generate_shapes_segmentation::<f64>(&spec(2)).unwrap();
    write_dataset(dir.path(), &splits, None).unwrap();
    let back = load_splits::<f64>(dir.path(), None).unwrap();
    assert_eq!(back.val.labels, splits.val.labels);
    assert_eq!(back.val.bands, rgb_bands());
    let err = back.val.images.max_abs_diff(&splits.val.images);
    assert!(err <= 0.5 / 65535.0 + 1e-9, "{err}");
}

#[test]
fn iteration_follows_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_shapes_segmentation::<f64>(&spec(5)).unwrap(), None).unwrap();
    let split = load_folder_dataset(dir.path(), "train").unwrap();
    let idx: Vec<usize> = split.iter().map(|s| s.unwrap().index).collect();
    assert_eq!(idx, (0..6).collect::<Vec<_>>());
    let names: Vec<&str> = split.records().iter().map(|r| r.image.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn missing_mask_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_shapes_segmentation::<f64>(&spec(1)).unwrap(), None).unwrap();
    std::fs::remove_file(dir.path().join("val/000001_mask.png")).unwrap();
    let split = load_folder_dataset(dir.path(), "val").unwrap();
    let results: Vec<_> = split.iter().collect();
    assert!(results[0].is_ok());
    match &results[1] {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("val/000001_mask.png")),
        other => panic!("expected an io error, got {other:?}"),
    }
    assert!(split.to_dataset::<f64>(None).is_err());
}

#[test]
fn empty_split_loads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let s = SyntheticSpec { test: 0, ..spec(1) };
    write_dataset(dir.path(), &generate_shapes_segmentation::<f64>(&s).unwrap(), None).unwrap();
    let split = load_folder_dataset(dir.path(), "test").unwrap();
    assert!(split.is_empty());
    assert_eq!(split.iter().count(), 0);
    let ds = split.to_dataset::<f64>(None).unwrap();
    assert_eq!(ds.len(), 0);
}

#[test]
fn classification_and_multilabel_labels_survive() {
    for multi in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticSpec { num_classes: 3, ..spec(7) };
        let splits = generate_shapes_classification::<f64>(&s, multi).unwrap();
        let m = write_dataset(dir.path(), &splits, None).unwrap();
        let back = load_splits::<f64>(dir.path(), None).unwrap();
        assert_eq!(back.train.labels, splits.train.labels);
        assert_eq!(back.test.labels, splits.test.labels);
        if let Labels::MultiLabel { labels, .. } = &back.train.labels {
            assert!(multi);
            assert_eq!(*labels, 3);
            let first = load_folder_dataset(dir.path(), "train").unwrap().iter().next().unwrap().unwrap();
            let SampleLabel::MultiLabel(bits) = first.label else { panic!() };
            assert!(bits.iter().all(|&b| b <= 1));
        }
        assert_eq!(m.class_counts["train"].len(), 3);
    }
}

#[test]
fn required_bands_reorder_and_zero_fill() {
    let dir = tempfile::tempdir().unwrap();
    let splits = generate_shapes_segmentation::<f64>(&spec(1)).unwrap();
    write_dataset(dir.path(), &splits, None).unwrap();
    let req: Vec<String> = ["blue", "nir", "red"].iter().map(|s| s.to_string()).collect();
    let plain = load_folder_dataset(dir.path(), "test").unwrap().to_dataset::<f64>(None).unwrap();
    let ds = load_folder_dataset(dir.path(), "test").unwrap().to_dataset::<f64>(Some(&req)).unwrap();
    assert_eq!(ds.bands, req);
    let hw = 12 * 12;
    let (src, dst) = (plain.images.data(), ds.images.data());
    assert_eq!(&dst[..hw], &src[2 * hw..3 * hw]);
    assert!(dst[hw..2 * hw].iter().all(|&v| v == 0.0));
    assert_eq!(&dst[2 * hw..3 * hw], &src[..hw]);
}

#[test]
fn manifest_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_shapes_segmentation::<f64>(&spec(1)).unwrap(), None).unwrap();
    let p = dir.path().join(datasets::MANIFEST);
    let text = std::fs::read_to_string(&p).unwrap().replacen("\"version\": 1", "\"version\": 7", 1);
    std::fs::write(&p, text).unwrap();
    assert!(matches!(Manifest::load(dir.path()), Err(Error::Version { .. })));
}

proptest! {
    #[test]
    fn mask_codec_round_trips(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mask: Vec<usize> = (0..h * w).map(|i| ((seed >> (i % 56)) as usize ^ i) % 256).collect();
        let png = encode_mask(&mask, h, w).unwrap();
        let (back, bh, bw) = decode_mask(&png, Path::new("m.png")).unwrap();
        prop_assert_eq!((bh, bw), (h, w));
        prop_assert_eq!(back, mask);
    }
}
