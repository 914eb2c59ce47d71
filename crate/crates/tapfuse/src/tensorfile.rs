//! Named-tensor files (safetensors) for checkpoints and feature dumps.
//!
//! Every file carries a `format` metadata entry naming its content and a
//! format version; readers refuse anything else.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use tapfuse_core::features::{FeatureKey, FeatureStack};
use tapfuse_core::nn::ParamStore;
use tapfuse_core::{Real, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F16,
    F32,
    F64,
}

impl Precision {
    fn dtype(self) -> Dtype {
        match self {
            Precision::F16 => Dtype::F16,
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F16 => "f16",
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" | "half" => Ok(Precision::F16),
            "f32" | "float" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

fn encode<T: Real>(t: &Tensor<T>, p: Precision) -> Vec<u8> {
    let d = t.data();
    match p {
        Precision::F16 => d.iter().flat_map(|v| f16::from_f64(v.f64()).to_le_bytes()).collect(),
        Precision::F32 => d.iter().flat_map(|v| (v.f64() as f32).to_le_bytes()).collect(),
        Precision::F64 => d.iter().flat_map(|v| v.f64().to_le_bytes()).collect(),
    }
}

fn decode<T: Real>(view: &TensorView<'_>) -> Option<Tensor<T>> {
    let b = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F16 => b.chunks_exact(2).map(|c| T::of(f16::from_le_bytes([c[0], c[1]]).to_f64())).collect(),
        Dtype::F32 => b.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        Dtype::F64 => b.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        _ => return None,
    };
    Tensor::from_vec(view.shape(), data).ok()
}

/// Write `tensors` with `metadata`; `format` tags the content kind.
pub fn write<T: Real>(
    path: &Path,
    format: &str,
    tensors: &[(String, &Tensor<T>)],
    precision: Precision,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors.iter().map(|(n, t)| (n.clone(), encode(t, precision), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| TensorView::new(precision.dtype(), s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::corrupt(path, e))?;
    let mut meta: HashMap<String, String> = metadata.into_iter().collect();
    meta.insert("format".into(), format.into());
    meta.insert("version".into(), FORMAT_VERSION.into());
    meta.insert("precision".into(), precision.to_string());
    let out = safetensors::serialize(views, Some(meta)).map_err(|e| Error::corrupt(path, e))?;
    let out = canonical_header(out).map_err(|e| Error::corrupt(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The serializer emits metadata in hash order; rewrite the JSON header
/// with sorted keys so identical inputs give identical bytes.
fn canonical_header(file: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let n = u64::from_le_bytes(file[..8].try_into().map_err(|_| "short file")?) as usize;
    let header: serde_json::Value = serde_json::from_slice(&file[8..8 + n]).map_err(|e| e.to_string())?;
    let mut text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + file.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&file[8 + n..]);
    Ok(out)
}

/// Tensors in file order (sorted by name) plus metadata.
pub struct Loaded<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: BTreeMap<String, String>,
}

impl<T> Loaded<T> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}

pub fn read<T: Real>(path: &Path, format: &str) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
    match metadata.get("format") {
        Some(f) if f == format => {}
        other => return Err(Error::corrupt(path, format!("expected a {format} file, found {:?}", other))),
    }
    let version = metadata.get("version").cloned().unwrap_or_default();
    if version != FORMAT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION.into() });
    }
    let mut tensors = Vec::with_capacity(st.len());
    for (name, view) in st.iter() {
        let t = decode(&view).ok_or_else(|| Error::corrupt(path, format!("tensor {name} has unsupported dtype {:?}", view.dtype())))?;
        tensors.push((name.to_string(), t));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Loaded { tensors, metadata })
}

pub const PARAMS_FORMAT: &str = "tapfuse-params";
pub const FEATURES_FORMAT: &str = "tapfuse-features";

/// Parameters are always stored in f64 so checkpoints reload bit-exactly.
pub fn save_params<T: Real>(path: &Path, store: &ParamStore<T>, metadata: BTreeMap<String, String>) -> Result<()> {
    let tensors: Vec<(String, &Tensor<T>)> = store.entries().iter().map(|e| (e.name.clone(), &e.value)).collect();
    let mut meta = metadata;
    meta.insert("param_checksum".into(), crate::config::hex(&store.checksum()));
    write(path, PARAMS_FORMAT, &tensors, Precision::F64, meta)
}

/// Overwrite `store` from a checkpoint; names and shapes must agree.
pub fn load_params<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<BTreeMap<String, String>> {
    let loaded = read::<T>(path, PARAMS_FORMAT)?;
    if loaded.tensors.len() != store.len() {
        return Err(Error::Schema(format!("{}: {} tensors, the model has {}", path.display(), loaded.tensors.len(), store.len())));
    }
    let map: HashMap<String, Tensor<T>> = loaded.tensors.into_iter().collect();
    store.load_named(|n| map.get(n).cloned()).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Ok(loaded.metadata)
}

pub fn dump_stack<T: Real>(path: &Path, stack: &FeatureStack<T>, precision: Precision, metadata: BTreeMap<String, String>) -> Result<()> {
    let tensors: Vec<(String, &Tensor<T>)> = stack.iter().map(|(k, v)| (k.to_string(), v)).collect();
    write(path, FEATURES_FORMAT, &tensors, precision, metadata)
}

pub fn load_stack<T: Real>(path: &Path) -> Result<(FeatureStack<T>, BTreeMap<String, String>)> {
    let loaded = read::<T>(path, FEATURES_FORMAT)?;
    let mut stack = FeatureStack::new();
    for (name, t) in loaded.tensors {
        let key: FeatureKey = name.parse().map_err(|e| Error::corrupt(path, e))?;
        stack.insert(key, t).map_err(|e| Error::corrupt(path, e))?;
    }
    Ok((stack, loaded.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_rounds_to_nearest() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.0, 1.0 + 1e-4, -65504.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        write(&p, "t", &[("a".into(), &t)], Precision::F16, BTreeMap::new()).unwrap();
        let l = read::<f64>(&p, "t").unwrap();
        assert_eq!(l.tensors[0].1.data(), &[1.0, 1.0, -65504.0]);
        assert_eq!(l.meta("precision"), Some("f16"));
        assert!(matches!(read::<f64>(&p, "other"), Err(Error::Corrupt { .. })));
    }
}
