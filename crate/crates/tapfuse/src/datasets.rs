//! Datasets on disk: 16-bit PNG images, 8-bit PNG masks and a JSON manifest.
//!
//! Layout under `root`:
//!
//! ```text
//! manifest.json
//! train/000000.png        image (RGB16, GRAY16, or GRAY16 stacked planes)
//! train/000000_mask.png   segmentation mask (GRAY8), segmentation only
//! val/...  test/...
//! ```

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapfuse_core::data::{match_bands, Dataset, Labels, Splits, SyntheticSpec, TaskKind};
use tapfuse_core::{Real, Tensor};

use crate::config::hex;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLabel {
    Class(usize),
    Mask(String),
    Labels(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub split: String,
    pub image: String,
    pub label: RecordLabel,
    /// SHA-256 of the image file, and of the mask file when there is one.
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sha256: Option<String>,
}

/// Generator settings echoed into the manifest header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    pub generator: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub small_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SpecEcho {
    pub fn of(generator: &str, s: &SyntheticSpec) -> Self {
        SpecEcho {
            generator: generator.into(),
            train: s.train,
            val: s.val,
            test: s.test,
            image_size: s.image_size,
            num_classes: s.num_classes,
            small_fraction: s.small_fraction,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task: String,
    pub bands: Vec<String>,
    pub num_classes: usize,
    pub ignore_index: Option<usize>,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub spec: Option<SpecEcho>,
    /// Per split, pixel count of each class (segmentation) or sample count
    /// per class (classification, multi-label).
    #[serde(default)]
    pub class_counts: BTreeMap<String, Vec<u64>>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn task(&self) -> Result<TaskKind> {
        Ok(self.task.parse()?)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version { path, found: m.version.to_string(), expected: MANIFEST_VERSION.to_string() });
        }
        Ok(m)
    }
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encode one `(C, H, W)` image in `[0, 1]` as a 16-bit PNG.
pub fn encode_image<T: Real>(data: &[T], c: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    let (color, rows, samples): (png::ColorType, usize, Vec<u16>) = if c == 3 {
        let mut s = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for ch in 0..3 {
                s.push(to_u16(data[ch * h * w + p].f64()));
            }
        }
        (png::ColorType::Rgb, h, s)
    } else {
        // One band, or stacked planes of any other count.
        (png::ColorType::Grayscale, c * h, data.iter().map(|v| to_u16(v.f64())).collect())
    };
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    png_bytes(&bytes, w, rows, color, png::BitDepth::Sixteen)
}

fn png_bytes(data: &[u8], w: usize, h: usize, color: png::ColorType, depth: png::BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut wr = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
        wr.write_image_data(data).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(out)
}

struct Raster {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Raster> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::corrupt(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::corrupt(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| Error::corrupt(path, e))?;
    data.truncate(info.buffer_size());
    Ok(Raster { width: info.width as usize, height: info.height as usize, color: info.color_type, depth: info.bit_depth, data })
}

/// Decode an image written by [`encode_image`] into `(C, H, W)` planes.
pub fn decode_image(bytes: &[u8], path: &Path, channels: usize) -> Result<(Vec<f32>, usize, usize)> {
    let r = decode_png(bytes, path)?;
    if r.depth != png::BitDepth::Sixteen {
        return Err(Error::corrupt(path, "images must be 16-bit"));
    }
    let vals: Vec<f32> = r.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0).collect();
    let stored = match r.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => {
            if r.height % channels != 0 {
                return Err(Error::Data(format!("{}: {} rows do not hold {channels} stacked bands", path.display(), r.height)));
            }
            channels
        }
        other => return Err(Error::corrupt(path, format!("unsupported color type {other:?}"))),
    };
    if stored != channels {
        return Err(Error::Data(format!("{}: stores {stored} bands, the manifest declares {channels}", path.display())));
    }
    let (h, w) = (if r.color == png::ColorType::Rgb { r.height } else { r.height / channels }, r.width);
    let planes = if r.color == png::ColorType::Rgb {
        let mut p = vec![0.0; 3 * h * w];
        for (i, v) in vals.iter().enumerate() {
            p[(i % 3) * h * w + i / 3] = *v;
        }
        p
    } else {
        vals
    };
    Ok((planes, h, w))
}

pub fn encode_mask(mask: &[usize], h: usize, w: usize) -> Result<Vec<u8>> {
    if let Some(v) = mask.iter().find(|&&v| v > 255) {
        return Err(Error::Data(format!("mask value {v} does not fit an 8-bit mask")));
    }
    let bytes: Vec<u8> = mask.iter().map(|&v| v as u8).collect();
    png_bytes(&bytes, w, h, png::ColorType::Grayscale, png::BitDepth::Eight)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let r = decode_png(bytes, path)?;
    if r.color != png::ColorType::Grayscale || r.depth != png::BitDepth::Eight {
        return Err(Error::corrupt(path, "masks must be 8-bit grayscale"));
    }
    Ok((r.data.iter().map(|&v| v as usize).collect(), r.height, r.width))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn class_counts(labels: &Labels, classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    match labels {
        Labels::Class(v) => v.iter().for_each(|&c| counts[c] += 1),
        Labels::Mask { data, .. } => data.iter().filter(|&&c| c < classes).for_each(|&c| counts[c] += 1),
        Labels::MultiLabel { data, labels } => {
            for row in data.chunks(*labels) {
                row.iter().enumerate().filter(|(_, &b)| b != 0).for_each(|(c, _)| counts[c] += 1);
            }
        }
    }
    counts
}

/// Write all three splits and the manifest. Output bytes are a pure
/// function of the inputs.
pub fn write_dataset<T: Real>(root: &Path, splits: &Splits<T>, spec: Option<SpecEcho>) -> Result<Manifest> {
    let parts = [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)];
    let first = &splits.train;
    let (_, c, h, w) = first.images.dims4()?;
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    for (name, ds) in parts {
        let n = ds.len();
        let per = c * h * w;
        for i in 0..n {
            let img = encode_image(&ds.images.data()[i * per..(i + 1) * per], c, h, w)?;
            let rel = format!("{name}/{i:06}.png");
            write_file(&root.join(&rel), &img)?;
            let (label, mask_sha256) = match &ds.labels {
                Labels::Class(v) => (RecordLabel::Class(v[i]), None),
                Labels::MultiLabel { data, labels } => (RecordLabel::Labels(data[i * labels..(i + 1) * labels].to_vec()), None),
                Labels::Mask { data, h, w } => {
                    let m = encode_mask(&data[i * h * w..(i + 1) * h * w], *h, *w)?;
                    let mrel = format!("{name}/{i:06}_mask.png");
                    write_file(&root.join(&mrel), &m)?;
                    (RecordLabel::Mask(mrel), Some(sha(&m)))
                }
            };
            records.push(Record { split: name.into(), image: rel, label, sha256: sha(&img), mask_sha256 });
        }
        counts.insert(name.to_string(), class_counts(&ds.labels, ds.num_classes));
    }
    let m = Manifest {
        version: MANIFEST_VERSION,
        task: first.task().name().into(),
        bands: first.bands.clone(),
        num_classes: first.num_classes,
        ignore_index: first.ignore_index,
        height: h,
        width: w,
        spec,
        class_counts: counts,
        records,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&root.join(MANIFEST), text.as_bytes())?;
    Ok(m)
}

/// One decoded sample. `image` is `(C, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: Vec<f32>,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleLabel {
    Class(usize),
    Mask(Vec<usize>),
    MultiLabel(Vec<u8>),
}

/// A split of a folder dataset. Files are read on iteration, in manifest
/// order.
pub struct FolderSplit {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub split: String,
    records: Vec<Record>,
}

pub fn load_folder_dataset(root: &Path, split: &str) -> Result<FolderSplit> {
    let manifest = Manifest::load(root)?;
    manifest.task()?;
    let records: Vec<Record> = manifest.records.iter().filter(|r| r.split == split).cloned().collect();
    Ok(FolderSplit { root: root.to_path_buf(), manifest, split: split.into(), records })
}

impl FolderSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    fn read(&self, rel: &str) -> Result<(PathBuf, Vec<u8>)> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, bytes))
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let m = &self.manifest;
        let (path, bytes) = self.read(&r.image)?;
        let (image, h, w) = decode_image(&bytes, &path, m.bands.len())?;
        if (h, w) != (m.height, m.width) {
            return Err(Error::Data(format!("{}: {h}x{w} image, the manifest declares {}x{}", path.display(), m.height, m.width)));
        }
        let label = match &r.label {
            RecordLabel::Class(c) => SampleLabel::Class(*c),
            RecordLabel::Labels(v) => SampleLabel::MultiLabel(v.clone()),
            RecordLabel::Mask(rel) => {
                let (mpath, mbytes) = self.read(rel)?;
                let (mask, mh, mw) = decode_mask(&mbytes, &mpath)?;
                if (mh, mw) != (h, w) {
                    return Err(Error::Data(format!("{}: mask is {mh}x{mw}, image is {h}x{w}", mpath.display())));
                }
                SampleLabel::Mask(mask)
            }
        };
        Ok(Sample { index, image, label })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.records.len()).map(move |i| self.sample(i))
    }

    /// Materialise the split, reordering and zero-filling bands to
    /// `required` (the manifest's bands when `None`).
    pub fn to_dataset<T: Real>(&self, required: Option<&[String]>) -> Result<Dataset<T>> {
        let m = &self.manifest;
        let task = m.task()?;
        let (c, h, w) = (m.bands.len(), m.height, m.width);
        let mut pixels = Vec::with_capacity(self.len() * c * h * w);
        let mut classes = Vec::new();
        let mut masks = Vec::new();
        let mut multi = Vec::new();
        let mut labels_per = m.num_classes;
        for s in self.iter() {
            let s = s?;
            pixels.extend(s.image.iter().map(|&v| T::of(v as f64)));
            match (s.label, task) {
                (SampleLabel::Class(k), TaskKind::Classification) => classes.push(k),
                (SampleLabel::Mask(v), TaskKind::Segmentation) => masks.extend(v),
                (SampleLabel::MultiLabel(v), TaskKind::MultiLabel) => {
                    labels_per = v.len();
                    multi.extend(v);
                }
                (_, t) => return Err(Error::Data(format!("record {} does not carry a {} label", s.index, t.name()))),
            }
        }
        let labels = match task {
            TaskKind::Classification => Labels::Class(classes),
            TaskKind::Segmentation => Labels::Mask { data: masks, h, w },
            TaskKind::MultiLabel => Labels::MultiLabel { data: multi, labels: labels_per },
        };
        let mut images = Tensor::from_vec(&[self.len(), c, h, w], pixels)?;
        let mut bands = m.bands.clone();
        if let Some(req) = required {
            images = match_bands(&images, &m.bands, req)?;
            bands = req.to_vec();
        }
        Ok(Dataset::new(images, labels, bands, m.num_classes, m.ignore_index)?)
    }
}

/// All three splits of a folder dataset.
pub fn load_splits<T: Real>(root: &Path, required: Option<&[String]>) -> Result<Splits<T>> {
    let load = |s: &str| load_folder_dataset(root, s)?.to_dataset::<T>(required);
    Ok(Splits { train: load("train")?, val: load("val")?, test: load("test")? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_codec_round_trips_within_quantisation() {
        for c in [1, 3, 4] {
            let data: Vec<f64> = (0..c * 5 * 7).map(|i| (i * 37 % 101) as f64 / 100.0).collect();
            let png = encode_image(&data, c, 5, 7).unwrap();
            let (back, h, w) = decode_image(&png, Path::new("x.png"), c).unwrap();
            assert_eq!((h, w), (5, 7));
            for (a, b) in data.iter().zip(&back) {
                assert!((a - *b as f64).abs() <= 0.5 / 65535.0 + 1e-7);
            }
        }
    }

    #[test]
    fn band_count_mismatch_is_reported() {
        let png = encode_image(&[0.5f64; 3 * 4], 3, 2, 2).unwrap();
        assert!(matches!(decode_image(&png, Path::new("x.png"), 4), Err(Error::Data(_))));
    }
}
