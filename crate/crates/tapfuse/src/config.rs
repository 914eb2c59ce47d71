//! Run configuration: one TOML file shared by every command, plus dotted
//! `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapfuse_core::data::{SyntheticSpec, TaskKind};
use tapfuse_core::diffusion::{DenoiserConfig, NoiseSchedule, PretrainConfig};
use tapfuse_core::features::{ExtractionPlan, HalfSelection, Selector};
use tapfuse_core::fusion::{FusionConfig, GateConfig, GatePooling, MoeConfig, Strategy};
use tapfuse_core::heads::{HeadKind, UperNetConfig};
use tapfuse_core::probe::ProbeConfig;
use tapfuse_core::taps::ModuleKind;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub extract: ExtractConfig,
    pub probe: ProbeSection,
    pub ablate: AblateConfig,
    pub viz: VizConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            extract: ExtractConfig::default(),
            probe: ProbeSection::default(),
            ablate: AblateConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

/// Where samples come from. `root` is either where `gen-data` writes the
/// synthetic set or an existing folder dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: String,
    pub task: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub small_fraction: f64,
    pub noise: f64,
    /// Fraction of training labels kept, stratified by class.
    pub label_fraction: f64,
    /// Augmented copies of the training split extracted next to the original.
    pub augment_views: usize,
    pub ignore_index: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig {
            root: "data".into(),
            task: "segmentation".into(),
            train: s.train,
            val: s.val,
            test: s.test,
            image_size: s.image_size,
            num_classes: s.num_classes,
            small_fraction: s.small_fraction,
            noise: s.noise,
            label_fraction: 1.0,
            augment_views: 0,
            ignore_index: None,
        }
    }
}

impl DataConfig {
    pub fn task(&self) -> Result<TaskKind> {
        Ok(self.task.parse()?)
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train: self.train,
            val: self.val,
            test: self.test,
            image_size: self.image_size,
            num_classes: self.num_classes,
            small_fraction: self.small_fraction,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub blocks_per_scale: usize,
    pub attention_heads: usize,
    pub context_dim: usize,
    pub context_tokens: usize,
    /// "identity" or "patchify".
    pub codec: String,
    pub patchify_stride: usize,
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: usize,
    pub grad_clip: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        let p = PretrainConfig::default();
        BackboneConfig {
            channels: d.channels_per_scale,
            blocks_per_scale: d.blocks_per_scale,
            attention_heads: d.attention_heads,
            context_dim: d.context_dim,
            context_tokens: d.context_tokens,
            codec: "patchify".into(),
            patchify_stride: 2,
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            pretrain_steps: p.steps,
            pretrain_batch: p.batch_size,
            pretrain_lr: p.lr,
            pretrain_warmup: p.warmup_steps,
            grad_clip: p.grad_clip,
        }
    }
}

impl BackboneConfig {
    /// Denoiser geometry for RGB-like images of `channels` bands.
    pub fn denoiser(&self, image_channels: usize, image_size: usize) -> Result<DenoiserConfig> {
        let r = match self.codec.as_str() {
            "identity" => 1,
            "patchify" => self.patchify_stride,
            other => return Err(Error::Config(format!("unknown codec {other:?}"))),
        };
        if r == 0 || image_size % r != 0 {
            return Err(Error::Config(format!("image size {image_size} is not divisible by the codec stride {r}")));
        }
        let cfg = DenoiserConfig {
            num_scales: self.channels.len(),
            channels_per_scale: self.channels.clone(),
            blocks_per_scale: self.blocks_per_scale,
            attention_heads: self.attention_heads,
            context_dim: self.context_dim,
            context_tokens: self.context_tokens,
            latent_channels: image_channels * r * r,
            latent_size: (image_size / r, image_size / r),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)?)
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            warmup_steps: self.pretrain_warmup,
            grad_clip: self.grad_clip,
            seed,
            ..PretrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub timesteps: Vec<usize>,
    pub kinds: Vec<String>,
    pub scales: Vec<usize>,
    pub half: String,
    pub include_mid: bool,
    pub inversion_stride: usize,
    pub batch_size: usize,
    /// Stored precision of feature dumps: "f16", "f32" or "f64".
    pub precision: String,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            timesteps: vec![1, 100, 200],
            kinds: vec!["res".into(), "sa".into()],
            scales: vec![1, 2, 3, 4],
            half: "decoder".into(),
            include_mid: false,
            inversion_stride: 1,
            batch_size: 32,
            precision: "f16".into(),
        }
    }
}

pub fn parse_kind(s: &str) -> Result<ModuleKind> {
    match s.to_ascii_lowercase().as_str() {
        "res" | "resnet" | "r" => Ok(ModuleKind::ResNet),
        "sa" | "self_attention" | "self-attention" | "a" => Ok(ModuleKind::SelfAttention),
        "ca" | "cross_attention" | "cross-attention" | "c" => Ok(ModuleKind::CrossAttention),
        _ => Err(Error::Config(format!("unknown module kind {s:?}"))),
    }
}

impl ExtractConfig {
    pub fn plan(&self) -> Result<ExtractionPlan> {
        let selectors = self.kinds.iter().map(|k| parse_kind(k).map(Selector::all)).collect::<Result<Vec<_>>>()?;
        Ok(ExtractionPlan {
            timesteps: self.timesteps.clone(),
            selectors,
            scales: self.scales.clone(),
            half: self.half.parse::<HalfSelection>()?,
            include_mid: self.include_mid,
            inversion_stride: self.inversion_stride,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub strategy: String,
    pub d_out: Vec<usize>,
    pub projection_activation: bool,
    pub gate_hidden: usize,
    pub gate_kernel: usize,
    pub gate_depth: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden_mult: usize,
    /// "pooled" or "pixel".
    pub router: String,
    pub load_balance: f64,
    /// "linear" or "upernet"; empty picks by task.
    pub head: String,
    pub fpn_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub class_weights: Option<Vec<f64>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        let p = ProbeConfig::default();
        let u = UperNetConfig::default();
        ProbeSection {
            strategy: f.strategy.name().into(),
            d_out: f.d_out,
            projection_activation: f.projection_activation,
            gate_hidden: f.gate.hidden,
            gate_kernel: f.gate.kernel,
            gate_depth: f.gate.depth,
            num_experts: f.moe.num_experts,
            top_k: f.moe.top_k,
            expert_hidden_mult: f.moe.hidden_mult,
            router: "pooled".into(),
            load_balance: f.moe.load_balance,
            head: String::new(),
            fpn_channels: u.fpn_channels,
            ppm_bins: u.ppm_bins,
            class_weights: None,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            warmup_epochs: p.warmup_epochs,
            weight_decay: p.weight_decay,
            grad_clip: p.grad_clip,
        }
    }
}

impl ProbeSection {
    pub fn fusion(&self, strategy: Strategy) -> Result<FusionConfig> {
        let pooling = match self.router.as_str() {
            "pooled" | "global" => GatePooling::GlobalAverage,
            "pixel" | "per_pixel" => GatePooling::PerPixel,
            other => return Err(Error::Config(format!("unknown router pooling {other:?}"))),
        };
        Ok(FusionConfig {
            strategy,
            d_out: self.d_out.clone(),
            projection_activation: self.projection_activation,
            gate: GateConfig { hidden: self.gate_hidden, kernel: self.gate_kernel, depth: self.gate_depth },
            moe: MoeConfig {
                num_experts: self.num_experts,
                top_k: self.top_k,
                hidden_mult: self.expert_hidden_mult,
                pooling,
                load_balance: self.load_balance,
            },
        })
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Ok(self.strategy.parse()?)
    }

    /// Core probe settings for `strategy`; the head follows the task unless
    /// pinned.
    pub fn probe(&self, strategy: Strategy, task: TaskKind, seed: u64) -> Result<ProbeConfig> {
        let head = match self.head.as_str() {
            "" if task == TaskKind::Segmentation => HeadKind::UperNet,
            "" => HeadKind::Linear,
            h => h.parse()?,
        };
        Ok(ProbeConfig {
            fusion: self.fusion(strategy)?,
            head,
            decoder: UperNetConfig { fpn_channels: self.fpn_channels, ppm_bins: self.ppm_bins.clone() },
            class_weights: self.class_weights.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed,
        })
    }
}

/// Raw-feature grid plus reference rows for `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub timesteps: Vec<usize>,
    pub kinds: Vec<String>,
    pub baselines: Vec<String>,
    /// Timesteps fed to the baseline rows; empty means the extract section's.
    pub baseline_timesteps: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            timesteps: vec![1, 100, 200, 500, 800, 1000],
            kinds: vec!["res".into(), "sa".into()],
            baselines: vec!["concat".into(), "global".into(), "localized".into(), "moe".into()],
            baseline_timesteps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    /// Test-split images rendered by the viz commands.
    pub images: Vec<usize>,
    pub timestep: usize,
    pub scale: usize,
    /// Query pixel `[row, col]` on the scale's grid.
    pub query: [usize; 2],
    pub cell_pixels: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig { images: vec![0], timestep: 100, scale: 2, query: [4, 4], cell_pixels: 16 }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Apply `key.path=value` overrides. Values are parsed as TOML literals,
    /// falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Parse every enumerated setting so typos fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        let task = self.data.task()?;
        self.backbone.denoiser(3, self.data.image_size)?.validate()?;
        self.backbone.schedule()?;
        self.extract.plan()?;
        self.extract.precision.parse::<crate::tensorfile::Precision>()?;
        let strategy = self.probe.strategy()?;
        self.probe.probe(strategy, task, self.seed)?;
        for k in &self.ablate.kinds {
            parse_kind(k)?;
        }
        for b in &self.ablate.baselines {
            b.parse::<Strategy>()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            // Options absent from the rendering (None) are still valid keys;
            // deserialisation rejects anything unknown.
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config section {part:?} in {key}")))?;
    }
    Err(Error::Config("empty override key".into()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_parse_literals() {
        let c = Config::default()
            .with_overrides(&["probe.strategy=moe".into(), "extract.timesteps=[1, 50]".into(), "probe.grad_clip=1.5".into(), "seed=4".into()])
            .unwrap();
        assert_eq!(c.probe.strategy, "moe");
        assert_eq!(c.extract.timesteps, vec![1, 50]);
        assert_eq!(c.probe.grad_clip, Some(1.5));
        assert_eq!(c.seed, 4);
        assert_ne!(c.checksum(), Config::default().checksum());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let c = Config::default();
        for bad in ["probe.nope=1", "nosuch.key=1", "probe", "probe.epochs=\"x\""] {
            assert!(matches!(c.with_overrides(&[bad.into()]), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn plan_and_denoiser_follow_sections() {
        let c = Config::default();
        let plan = c.extract.plan().unwrap();
        assert_eq!(plan, tapfuse_core::features::default_plan());
        let d = c.backbone.denoiser(3, 64).unwrap();
        assert_eq!((d.latent_channels, d.latent_size), (12, (32, 32)));
        assert!(c.backbone.denoiser(3, 63).is_err());
    }
}
