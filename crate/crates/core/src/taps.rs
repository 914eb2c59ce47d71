//! Addressing of intermediate activations inside a denoiser.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;
use crate::tensor::Tensor;

/// Module family a captured tensor came from. The derived order is the
/// stable within-block ordering used everywhere features are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    ResNet,
    SelfAttention,
    CrossAttention,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::ResNet, ModuleKind::SelfAttention, ModuleKind::CrossAttention];

    pub fn tag(self) -> &'static str {
        match self {
            ModuleKind::ResNet => "res",
            ModuleKind::SelfAttention => "sa",
            ModuleKind::CrossAttention => "ca",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "res" | "resnet" | "r" => Ok(ModuleKind::ResNet),
            "sa" | "self" | "self_attention" | "selfattention" | "a" => Ok(ModuleKind::SelfAttention),
            "ca" | "cross" | "cross_attention" | "crossattention" | "c" => Ok(ModuleKind::CrossAttention),
            _ => Err(Error::Config(alloc::format!("unknown module kind {s:?}"))),
        }
    }
}

/// Which side of the U-Net a block sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Half {
    Encoder,
    Mid,
    Decoder,
}

impl FromStr for Half {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "encoder" | "enc" => Ok(Half::Encoder),
            "mid" | "middle" | "bottleneck" => Ok(Half::Mid),
            "decoder" | "dec" => Ok(Half::Decoder),
            _ => Err(Error::Config(alloc::format!("unknown network half {s:?}"))),
        }
    }
}

/// A single tappable activation. `scale` is 1-based (1 = finest) and
/// `block` numbers blocks within the scale across the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapPoint {
    pub scale: usize,
    pub block: usize,
    pub kind: ModuleKind,
    pub half: Half,
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}_l{}_{} ({:?})", self.scale, self.block, self.kind, self.half)
    }
}

/// Activations to capture during one denoiser evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapRequest {
    pub points: BTreeSet<TapPoint>,
    /// Self-attention blocks whose probability matrices should be returned.
    pub attention_maps: BTreeSet<TapPoint>,
}

impl TapRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(points: impl IntoIterator<Item = TapPoint>) -> Self {
        TapRequest { points: points.into_iter().collect(), attention_maps: BTreeSet::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.attention_maps.is_empty()
    }

    /// Reject any point the backbone does not expose.
    pub fn validate(&self, available: &[TapPoint]) -> Result<(), Error> {
        for p in self.points.iter().chain(self.attention_maps.iter()) {
            if !available.contains(p) {
                return Err(Error::Tap(alloc::format!("{p}")));
            }
        }
        if let Some(p) = self.attention_maps.iter().find(|p| p.kind != ModuleKind::SelfAttention) {
            return Err(Error::Tap(alloc::format!("attention maps exist only for self-attention, got {p}")));
        }
        Ok(())
    }
}

/// Captured tensors. ResNet outputs are `(B, C, h, w)`; attention outputs are
/// token sequences `(B, h*w, C)`; attention maps are `(B, N, N)`.
#[derive(Debug, Clone, Default)]
pub struct Captures<T> {
    pub features: Vec<(TapPoint, Tensor<T>)>,
    pub attention_maps: Vec<(TapPoint, Tensor<T>)>,
}

impl<T> Captures<T> {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty() && self.attention_maps.is_empty()
    }

    pub fn get(&self, p: &TapPoint) -> Option<&Tensor<T>> {
        self.features.iter().find(|(q, _)| q == p).map(|(_, t)| t)
    }
}
