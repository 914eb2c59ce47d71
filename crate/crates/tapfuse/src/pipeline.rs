//! End-to-end stages shared by the command line and the tests. Every stage
//! reads and writes under one output directory:
//!
//! ```text
//! data/                       dataset (gen-data)
//! backbone.safetensors        frozen denoiser (pretrain)
//! features/{split}.safetensors
//! probe/{strategy}/           checkpoint, metrics.json, eval.json
//! ablate/                     ablate.csv, ablate.json, plots
//! viz/{weights,features,experts,attention}/
//! runs.csv                    one appended row per train run
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapfuse_core::data::{
    augment_batch, generate_shapes_classification, generate_shapes_segmentation, normalize_bands, stratified_subsample, BandStats, Dataset,
    Labels, Splits, TaskKind,
};
use tapfuse_core::diffusion::{ddim_invert, pretrain_denoiser, ConditioningContext, Denoiser, DenoiserConfig, LatentCodec, NoiseSchedule, ToyUNet};
use tapfuse_core::features::{extract_batched, Backbone, ExtractionPlan, FeatureKey, FeatureStack};
use tapfuse_core::fusion::{FeatureLayout, ScaleFusion, Strategy};
use tapfuse_core::nn::Ctx;
use tapfuse_core::probe::{train_probe, EvalMetrics, Probe, ProbeData, TrainReport};
use tapfuse_core::taps::{Half, ModuleKind, TapPoint, TapRequest};
use tapfuse_core::{Graph, Tensor};

use crate::config::{hex, parse_kind, Config};
use crate::datasets::{load_splits, write_dataset, Manifest, SpecEcho};
use crate::error::{Error, Result};
use crate::tensorfile::{self, Precision};
use crate::viz;

/// Working precision of every stage.
pub type F = f32;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Workspace { out: out.into() }
    }

    /// Relative `data.root` values resolve against the output directory.
    pub fn data_root(&self, cfg: &Config) -> PathBuf {
        let p = Path::new(&cfg.data.root);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn backbone(&self) -> PathBuf {
        self.out.join("backbone.safetensors")
    }

    pub fn features(&self, split: &str) -> PathBuf {
        self.out.join("features").join(format!("{split}.safetensors"))
    }

    pub fn probe_dir(&self, strategy: Strategy) -> PathBuf {
        self.out.join("probe").join(strategy.name())
    }

    pub fn checkpoint(&self, strategy: Strategy) -> PathBuf {
        self.probe_dir(strategy).join("checkpoint.safetensors")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.out.join("ablate")
    }

    pub fn viz_dir(&self, what: &str) -> PathBuf {
        self.out.join("viz").join(what)
    }
}

fn sha_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    viz::write_bytes(path, format!("{text}\n").as_bytes())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_checksum: String,
    pub config: String,
    pub backbone_checksum: Option<String>,
    /// Output file (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub created_unix: u64,
    pub wall_clock_seconds: f64,
}

/// Tracks one command invocation and writes its run record.
pub struct Run<'a> {
    command: String,
    cfg: &'a Config,
    ws: &'a Workspace,
    start: Instant,
    pub backbone_checksum: Option<String>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn start(command: &str, cfg: &'a Config, ws: &'a Workspace) -> Self {
        Run { command: command.into(), cfg, ws, start: Instant::now(), backbone_checksum: None, outputs: Vec::new() }
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Write `dir/run.json` and return its path.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.ws.out).unwrap_or(p).to_string_lossy().into_owned();
            outputs.insert(rel, sha_file(p)?);
        }
        let record = RunRecord {
            command: self.command,
            version: VERSION.into(),
            seed: self.cfg.seed,
            config_checksum: self.cfg.checksum(),
            config: self.cfg.to_toml(),
            backbone_checksum: self.backbone_checksum,
            outputs,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        let path = dir.join("run.json");
        write_json(&path, &record)?;
        Ok(path)
    }
}

// ---------------------------------------------------------------- data

/// Generate the synthetic benchmark for the configured task and write it.
pub fn gen_data(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let spec = cfg.data.synthetic(cfg.seed);
    let task = cfg.data.task()?;
    let (splits, name) = match task {
        TaskKind::Segmentation => (generate_shapes_segmentation::<F>(&spec)?, "shapes-segmentation"),
        TaskKind::Classification => (generate_shapes_classification::<F>(&spec, false)?, "shapes-classification"),
        TaskKind::MultiLabel => (generate_shapes_classification::<F>(&spec, true)?, "shapes-multilabel"),
    };
    let root = ws.data_root(cfg);
    if root.exists() {
        // Stale files from a larger earlier run must not linger.
        for split in crate::datasets::SPLITS {
            let d = root.join(split);
            if d.exists() {
                std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    write_dataset(&root, &splits, Some(SpecEcho::of(name, &spec)))
}

/// Splits normalised with per-band min/max of the training split.
pub struct Prepared {
    pub splits: Splits<F>,
    pub stats: BandStats,
    pub manifest: Manifest,
}

pub fn prepare_data(cfg: &Config, ws: &Workspace) -> Result<Prepared> {
    let root = ws.data_root(cfg);
    let manifest = Manifest::load(&root)?;
    let mut splits = load_splits::<F>(&root, None)?;
    if splits.train.is_empty() {
        return Err(Error::Data(format!("{}: the training split is empty", root.display())));
    }
    let stats = BandStats::compute(&splits.train.images)?;
    for ds in [&mut splits.train, &mut splits.val, &mut splits.test] {
        if !ds.is_empty() {
            ds.images = normalize_bands(&ds.images, &stats)?;
        }
    }
    Ok(Prepared { splits, stats, manifest })
}

fn concat_labels(parts: &[Labels]) -> Labels {
    match &parts[0] {
        Labels::Class(_) => Labels::Class(parts.iter().flat_map(|l| if let Labels::Class(v) = l { v.clone() } else { vec![] }).collect()),
        Labels::Mask { h, w, .. } => Labels::Mask {
            data: parts.iter().flat_map(|l| if let Labels::Mask { data, .. } = l { data.clone() } else { vec![] }).collect(),
            h: *h,
            w: *w,
        },
        Labels::MultiLabel { labels, .. } => Labels::MultiLabel {
            data: parts.iter().flat_map(|l| if let Labels::MultiLabel { data, .. } = l { data.clone() } else { vec![] }).collect(),
            labels: *labels,
        },
    }
}

/// The training split followed by `data.augment_views` augmented copies.
/// Each copy draws from its own seed stream, so the result depends only on
/// the config.
pub fn train_views(cfg: &Config, train: &Dataset<F>) -> Result<Dataset<F>> {
    if cfg.data.augment_views == 0 {
        return Ok(train.clone());
    }
    let mut images = vec![train.images.clone()];
    let mut labels = vec![train.labels.clone()];
    for v in 1..=cfg.data.augment_views {
        let mut im = train.images.clone();
        let mut lb = train.labels.clone();
        let mut rng = tapfuse_core::rng(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ v as u64);
        augment_batch(&mut im, &mut lb, &mut rng)?;
        images.push(im);
        labels.push(lb);
    }
    let refs: Vec<&Tensor<F>> = images.iter().collect();
    Ok(Dataset::new(Tensor::concat(&refs, 0)?, concat_labels(&labels), train.bands.clone(), train.num_classes, train.ignore_index)?)
}

// ---------------------------------------------------------------- backbone

/// Frozen denoiser with everything needed to run it.
pub struct Bundle {
    pub unet: ToyUNet<F>,
    pub codec: LatentCodec<F>,
    pub schedule: NoiseSchedule,
    pub context: ConditioningContext<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    num_scales: usize,
    channels: Vec<usize>,
    blocks_per_scale: usize,
    attention_heads: usize,
    context_dim: usize,
    context_tokens: usize,
    latent_channels: usize,
    latent_size: (usize, usize),
    codec: String,
    stride: usize,
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    context_label: String,
}

const CONTEXT_TENSOR: &str = "__context__";
pub const CONTEXT_LABEL: &str = "A satellite image";

impl Bundle {
    pub fn new(cfg: &Config, image_channels: usize, image_size: usize) -> Result<Self> {
        let dc = cfg.backbone.denoiser(image_channels, image_size)?;
        let codec = match cfg.backbone.codec.as_str() {
            "identity" => LatentCodec::Identity,
            _ => LatentCodec::Patchify { stride: cfg.backbone.patchify_stride },
        };
        let context = ConditioningContext::random(dc.context_tokens, dc.context_dim, CONTEXT_LABEL, cfg.seed ^ 0xc0de);
        Ok(Bundle { unet: ToyUNet::new(dc, cfg.seed)?, codec, schedule: cfg.backbone.schedule()?, context })
    }

    pub fn backbone(&self) -> Backbone<'_, F, ToyUNet<F>> {
        Backbone { denoiser: &self.unet, codec: &self.codec, schedule: &self.schedule, context: &self.context }
    }

    pub fn checksum(&self) -> String {
        hex(&self.unet.checksum())
    }

    fn meta(&self) -> BundleMeta {
        let d = &self.unet.config;
        let (codec, stride) = match &self.codec {
            LatentCodec::Patchify { stride } => ("patchify".to_string(), *stride),
            _ => ("identity".to_string(), 1),
        };
        let b = self.schedule.betas();
        BundleMeta {
            num_scales: d.num_scales,
            channels: d.channels_per_scale.clone(),
            blocks_per_scale: d.blocks_per_scale,
            attention_heads: d.attention_heads,
            context_dim: d.context_dim,
            context_tokens: d.context_tokens,
            latent_channels: d.latent_channels,
            latent_size: d.latent_size,
            codec,
            stride,
            total_steps: self.schedule.total_steps(),
            beta_start: b[0],
            beta_end: b[b.len() - 1],
            context_label: self.context.label.clone(),
        }
    }

    pub fn save(&self, path: &Path, mut metadata: BTreeMap<String, String>) -> Result<()> {
        let meta = serde_json::to_string(&self.meta()).map_err(|e| Error::Data(e.to_string()))?;
        metadata.insert("backbone".into(), meta);
        metadata.insert("backbone_checksum".into(), self.checksum());
        let mut tensors: Vec<(String, &Tensor<F>)> = self.unet.store.entries().iter().map(|e| (e.name.clone(), &e.value)).collect();
        tensors.push((CONTEXT_TENSOR.into(), &self.context.embedding));
        tensorfile::write(path, "tapfuse-backbone", &tensors, Precision::F64, metadata)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = tensorfile::read::<F>(path, "tapfuse-backbone")?;
        let meta: BundleMeta =
            serde_json::from_str(loaded.meta("backbone").unwrap_or("")).map_err(|e| Error::corrupt(path, format!("backbone metadata: {e}")))?;
        let dc = DenoiserConfig {
            num_scales: meta.num_scales,
            channels_per_scale: meta.channels.clone(),
            blocks_per_scale: meta.blocks_per_scale,
            attention_heads: meta.attention_heads,
            context_dim: meta.context_dim,
            context_tokens: meta.context_tokens,
            latent_channels: meta.latent_channels,
            latent_size: meta.latent_size,
        };
        let mut unet = ToyUNet::new(dc, 0)?;
        let mut map: HashMap<String, Tensor<F>> = loaded.tensors.into_iter().collect();
        let embedding = map.remove(CONTEXT_TENSOR).ok_or_else(|| Error::corrupt(path, "missing conditioning context"))?;
        if map.len() != unet.store.len() {
            return Err(Error::Schema(format!("{}: {} tensors for a denoiser with {}", path.display(), map.len(), unet.store.len())));
        }
        unet.store.load_named(|n| map.get(n).cloned()).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        unet.store.freeze();
        let codec = if meta.codec == "patchify" { LatentCodec::Patchify { stride: meta.stride } } else { LatentCodec::Identity };
        let schedule = NoiseSchedule::linear(meta.total_steps, meta.beta_start, meta.beta_end)?;
        Ok(Bundle { unet, codec, schedule, context: ConditioningContext { embedding, label: meta.context_label } })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub first_100_mean: Option<f64>,
    pub last_100_mean: Option<f64>,
    pub backbone_checksum: String,
}

/// Train the denoiser on the training images and save it frozen.
pub fn pretrain(cfg: &Config, ws: &Workspace, data: &Prepared) -> Result<(Bundle, PretrainSummary)> {
    let train = &data.splits.train;
    let (_, c, h, w) = train.images.dims4()?;
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    let mut bundle = Bundle::new(cfg, c, h)?;
    let latents = bundle.codec.encode(&train.images)?;
    let report = pretrain_denoiser(&mut bundle.unet, &latents, &bundle.schedule, &bundle.context, &cfg.backbone.pretrain(cfg.seed))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    viz::write_bytes(&ws.out.join("pretrain_loss.csv"), log.as_bytes())?;
    let (head, tail) = report.head_tail_means(100).map_or((None, None), |(a, b)| (Some(a), Some(b)));
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("steps".into(), cfg.backbone.pretrain_steps.to_string());
    bundle.save(&ws.backbone(), meta)?;
    let summary = PretrainSummary { steps: report.losses.len(), first_100_mean: head, last_100_mean: tail, backbone_checksum: bundle.checksum() };
    write_json(&ws.out.join("pretrain.json"), &summary)?;
    Ok((bundle, summary))
}

// ---------------------------------------------------------------- features

pub fn extract_images(bundle: &Bundle, plan: &ExtractionPlan, images: &Tensor<F>, batch: usize) -> Result<FeatureStack<F>> {
    Ok(extract_batched(images, plan, &bundle.backbone(), batch.max(1))?)
}

fn dump_meta(plan: &ExtractionPlan, bundle: &Bundle, precision: Precision, n: usize) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("plan".into(), format!("{plan:?}"));
    m.insert("backbone_checksum".into(), bundle.checksum());
    m.insert("precision".into(), precision.to_string());
    m.insert("samples".into(), n.to_string());
    m.insert("created_unix".into(), SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0).to_string());
    m
}

/// Extracted features of the three splits (training views included).
#[derive(Debug, Clone)]
pub struct SplitFeatures {
    pub train: FeatureStack<F>,
    pub val: FeatureStack<F>,
    pub test: FeatureStack<F>,
}

/// Extract every split with `plan` and dump to `paths` (train, val, test).
pub fn extract_splits(
    cfg: &Config,
    bundle: &Bundle,
    data: &Prepared,
    plan: &ExtractionPlan,
    paths: [PathBuf; 3],
) -> Result<SplitFeatures> {
    let precision: Precision = cfg.extract.precision.parse()?;
    let train = train_views(cfg, &data.splits.train)?;
    let mut out = Vec::new();
    for (ds, path) in [&train, &data.splits.val, &data.splits.test].into_iter().zip(paths) {
        let stack = if ds.is_empty() { FeatureStack::new() } else { extract_images(bundle, plan, &ds.images, cfg.extract.batch_size)? };
        tensorfile::dump_stack(&path, &stack, precision, dump_meta(plan, bundle, precision, ds.len()))?;
        // Train on exactly what a later command would read back.
        let (back, _) = tensorfile::load_stack::<F>(&path)?;
        out.push(back);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(SplitFeatures { train, val, test })
}

/// Read a dump, checking it came from `bundle` and `plan`.
pub fn load_features(path: &Path, bundle_checksum: &str, plan: &ExtractionPlan) -> Result<FeatureStack<F>> {
    let (stack, meta) = tensorfile::load_stack::<F>(path)?;
    if meta.get("backbone_checksum").map(String::as_str) != Some(bundle_checksum) {
        return Err(Error::Schema(format!("{} was extracted with a different backbone; rerun extract", path.display())));
    }
    if meta.get("plan") != Some(&format!("{plan:?}")) {
        return Err(Error::Schema(format!("{} was extracted with a different plan; rerun extract", path.display())));
    }
    Ok(stack)
}

pub fn split_paths(dir: &Path, prefix: &str) -> [PathBuf; 3] {
    ["train", "val", "test"].map(|s| dir.join(format!("{prefix}{s}.safetensors")))
}

// ---------------------------------------------------------------- probes

/// Serializable copy of [`EvalMetrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub score: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub no_valid_pixels: bool,
}

impl From<&EvalMetrics> for MetricsSummary {
    fn from(m: &EvalMetrics) -> Self {
        MetricsSummary {
            score: m.score(),
            loss: m.loss,
            accuracy: m.accuracy,
            micro_f1: m.micro_f1,
            macro_f1: m.macro_f1,
            miou: m.miou,
            per_class_iou: m.per_class_iou.clone(),
            no_valid_pixels: m.no_valid_pixels,
        }
    }
}

/// Everything `train` reports. Timing lives in the run record so that
/// identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub task: String,
    pub seed: u64,
    pub config_checksum: String,
    pub backbone_checksum: String,
    pub label_fraction: f64,
    pub train_samples: usize,
    /// Classes raised to one sample by the label-fraction floor.
    pub floored_classes: Vec<usize>,
    pub epoch_losses: Vec<f64>,
    pub val_scores: Vec<f64>,
    pub best_epoch: usize,
    pub val: MetricsSummary,
    pub test: Option<MetricsSummary>,
}

pub fn probe_data(features: FeatureStack<F>, ds: &Dataset<F>) -> Result<ProbeData<F>> {
    Ok(ProbeData::new(features, ds.labels.clone(), ds.num_classes, ds.ignore_index, ds.image_size())?)
}

/// Training rows for `label_fraction`, stratified on the original split and
/// repeated for every augmented view.
pub fn label_subset(cfg: &Config, train: &Dataset<F>) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = train.len();
    let sub = stratified_subsample(&train.strata(), cfg.data.label_fraction, cfg.seed)?;
    if !sub.floored.is_empty() {
        eprintln!("warning: label fraction {} keeps no samples of classes {:?}; keeping one each", cfg.data.label_fraction, sub.floored);
    }
    let rows = (0..=cfg.data.augment_views).flat_map(|v| sub.indices.iter().map(move |&i| v * n + i)).collect();
    Ok((rows, sub.floored))
}

/// Build and fit one probe. The outer error covers construction; the inner
/// one reports divergence, in which case the probe holds its best parameters.
pub fn fit_probe(cfg: &Config, strategy: Strategy, seed: u64, train: &ProbeData<F>, val: &ProbeData<F>) -> Result<(Probe<F>, Result<TrainReport>)> {
    let pc = cfg.probe.probe(strategy, train.task(), seed)?;
    let mut probe = Probe::new(FeatureLayout::of(&train.features)?, train.task(), train.num_classes, train.image_size, &pc, train.ignore_index)?;
    let report = train_probe(&mut probe, train, val, &pc).map_err(Error::from);
    Ok((probe, report))
}

fn checkpoint_meta(cfg: &Config, strategy: Strategy, backbone: &str, layout: &FeatureLayout) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("strategy".into(), strategy.name().into());
    m.insert("config_checksum".into(), cfg.checksum());
    m.insert("backbone_checksum".into(), backbone.into());
    m.insert("layout".into(), format!("{layout:?}"));
    m.insert("seed".into(), cfg.seed.to_string());
    m
}

/// Backbone, data and cached features of the configured extraction plan.
pub struct Loaded {
    pub bundle: Bundle,
    pub data: Prepared,
    pub plan: ExtractionPlan,
    pub train: ProbeData<F>,
    pub val: ProbeData<F>,
    pub test: ProbeData<F>,
}

fn load_bundle(ws: &Workspace) -> Result<Bundle> {
    let p = ws.backbone();
    if !p.exists() {
        return Err(Error::Data(format!("{} does not exist; run pretrain first", p.display())));
    }
    Bundle::load(&p)
}

pub fn load_for_probe(cfg: &Config, ws: &Workspace) -> Result<Loaded> {
    let bundle = load_bundle(ws)?;
    let data = prepare_data(cfg, ws)?;
    let plan = cfg.extract.plan()?;
    let sum = bundle.checksum();
    let feats: Vec<FeatureStack<F>> = ["train", "val", "test"]
        .iter()
        .map(|s| {
            let p = ws.features(s);
            if !p.exists() {
                return Err(Error::Data(format!("{} does not exist; run extract first", p.display())));
            }
            load_features(&p, &sum, &plan)
        })
        .collect::<Result<_>>()?;
    let mut it = feats.into_iter();
    let train_ds = train_views(cfg, &data.splits.train)?;
    let train = probe_data(it.next().unwrap(), &train_ds)?;
    let val = probe_data(it.next().unwrap(), &data.splits.val)?;
    if data.splits.test.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    let test = probe_data(it.next().unwrap(), &data.splits.test)?;
    Ok(Loaded { bundle, data, plan, train, val, test })
}

/// `train`: fit the configured strategy, checkpoint it and report metrics.
pub fn train(cfg: &Config, ws: &Workspace) -> Result<MetricsReport> {
    let mut run = Run::start("train", cfg, ws);
    let l = load_for_probe(cfg, ws)?;
    let strategy = cfg.probe.strategy()?;
    let (rows, floored) = label_subset(cfg, &l.data.splits.train)?;
    let train = l.train.subset(&rows)?;
    let dir = ws.probe_dir(strategy);
    let ckpt = ws.checkpoint(strategy);
    let (probe, report) = fit_probe(cfg, strategy, cfg.seed, &train, &l.val)?;
    // Saved before checking for divergence so the best parameters survive it.
    tensorfile::save_params(&ckpt, &probe.store, checkpoint_meta(cfg, strategy, &l.bundle.checksum(), &probe.fusion.layout))?;
    let report = report?;
    let test = probe.evaluate(&l.test, cfg.probe.batch_size)?;
    let metrics = MetricsReport {
        strategy: strategy.name().into(),
        task: train.task().name().into(),
        seed: cfg.seed,
        config_checksum: cfg.checksum(),
        backbone_checksum: l.bundle.checksum(),
        label_fraction: cfg.data.label_fraction,
        train_samples: train.len(),
        floored_classes: floored,
        epoch_losses: report.epoch_losses.clone(),
        val_scores: report.val_scores.clone(),
        best_epoch: report.best_epoch,
        val: (&report.best_val).into(),
        test: Some((&test).into()),
    };
    let mpath = dir.join("metrics.json");
    write_json(&mpath, &metrics)?;
    append_runs_csv(ws, &metrics)?;
    run.backbone_checksum = Some(l.bundle.checksum());
    run.output(ckpt);
    run.output(mpath);
    run.finish(&dir)?;
    Ok(metrics)
}

fn append_runs_csv(ws: &Workspace, m: &MetricsReport) -> Result<()> {
    let path = ws.out.join("runs.csv");
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let err = |e: csv::Error| Error::Data(e.to_string());
    if fresh {
        w.write_record(["strategy", "task", "seed", "label_fraction", "best_epoch", "val_score", "test_score", "config_checksum"]).map_err(err)?;
    }
    let test = m.test.as_ref().map(|t| t.score.to_string()).unwrap_or_default();
    w.write_record([
        m.strategy.clone(),
        m.task.clone(),
        m.seed.to_string(),
        m.label_fraction.to_string(),
        m.best_epoch.to_string(),
        m.val.score.to_string(),
        test,
        m.config_checksum.clone(),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Rebuild the configured probe and load its checkpoint.
pub fn load_probe(cfg: &Config, ws: &Workspace, l: &Loaded, strategy: Strategy) -> Result<Probe<F>> {
    let pc = cfg.probe.probe(strategy, l.train.task(), cfg.seed)?;
    let mut probe = Probe::new(FeatureLayout::of(&l.train.features)?, l.train.task(), l.train.num_classes, l.train.image_size, &pc, l.train.ignore_index)?;
    let ckpt = ws.checkpoint(strategy);
    if !ckpt.exists() {
        return Err(Error::Data(format!("{} does not exist; run train first", ckpt.display())));
    }
    let meta = tensorfile::load_params(&ckpt, &mut probe.store)?;
    if meta.get("strategy").map(String::as_str) != Some(strategy.name()) {
        return Err(Error::Schema(format!("{} holds a {:?} probe", ckpt.display(), meta.get("strategy"))));
    }
    if meta.get("layout") != Some(&format!("{:?}", probe.fusion.layout)) {
        return Err(Error::Schema(format!("{} was trained on a different feature layout", ckpt.display())));
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub config_checksum: String,
    pub val: MetricsSummary,
    pub test: MetricsSummary,
}

/// `eval`: score a saved checkpoint on the validation and test splits.
pub fn evaluate(cfg: &Config, ws: &Workspace) -> Result<EvalReport> {
    let mut run = Run::start("eval", cfg, ws);
    let l = load_for_probe(cfg, ws)?;
    let strategy = cfg.probe.strategy()?;
    let probe = load_probe(cfg, ws, &l, strategy)?;
    let b = cfg.probe.batch_size;
    let report = EvalReport {
        strategy: strategy.name().into(),
        config_checksum: cfg.checksum(),
        val: (&probe.evaluate(&l.val, b)?).into(),
        test: (&probe.evaluate(&l.test, b)?).into(),
    };
    let dir = ws.probe_dir(strategy);
    let path = dir.join("eval.json");
    write_json(&path, &report)?;
    run.backbone_checksum = Some(l.bundle.checksum());
    run.output(path);
    let rec = dir.join("eval");
    run.finish(&rec)?;
    Ok(report)
}

// ---------------------------------------------------------------- ablation

/// One row of the ablation table: a raw-feature cell or a reference strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Module kind tag for raw cells, `fusion` for reference rows.
    pub kind: String,
    pub timestep: Option<usize>,
    pub strategy: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_score: f64,
    pub test_score: f64,
    pub test_accuracy: f64,
    pub test_miou: Option<f64>,
}

/// What one ablation row trains on.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Raw { timestep: usize, kind: ModuleKind },
    Reference { strategy: Strategy, timesteps: Vec<usize>, kinds: Vec<ModuleKind> },
}

impl Cell {
    pub fn name(&self) -> String {
        match self {
            Cell::Raw { timestep, kind } => format!("t{timestep}_{kind}"),
            Cell::Reference { strategy, .. } => strategy.name().to_string(),
        }
    }

    pub fn keeps(&self, k: &FeatureKey) -> bool {
        match self {
            Cell::Raw { timestep, kind } => k.timestep == *timestep && k.kind == *kind,
            Cell::Reference { timesteps, kinds, .. } => timesteps.contains(&k.timestep) && kinds.contains(&k.kind),
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            Cell::Raw { .. } => Strategy::Concat,
            Cell::Reference { strategy, .. } => *strategy,
        }
    }
}

/// Rows of the sweep: every (timestep, kind) cell, then the references.
pub fn ablation_grid(cfg: &Config) -> Result<Vec<Cell>> {
    let kinds = cfg.ablate.kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for &t in &cfg.ablate.timesteps {
        for &kind in &kinds {
            cells.push(Cell::Raw { timestep: t, kind });
        }
    }
    let ref_ts = if cfg.ablate.baseline_timesteps.is_empty() { cfg.extract.timesteps.clone() } else { cfg.ablate.baseline_timesteps.clone() };
    let ref_kinds = if kinds.is_empty() { cfg.extract.kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>>>()? } else { kinds.clone() };
    for b in &cfg.ablate.baselines {
        let strategy: Strategy = b.parse()?;
        cells.push(Cell::Reference { strategy, timesteps: ref_ts.clone(), kinds: ref_kinds.clone() });
    }
    if cells.is_empty() {
        return Err(Error::Config("the ablation grid is empty".into()));
    }
    Ok(cells)
}

/// Plan covering every timestep and kind the grid touches.
pub fn ablation_plan(cfg: &Config, cells: &[Cell]) -> Result<ExtractionPlan> {
    let mut ts = BTreeSet::new();
    let mut kinds = BTreeSet::new();
    for c in cells {
        match c {
            Cell::Raw { timestep, kind } => {
                ts.insert(*timestep);
                kinds.insert(*kind);
            }
            Cell::Reference { timesteps, kinds: k, .. } => {
                ts.extend(timesteps.iter().copied());
                kinds.extend(k.iter().copied());
            }
        }
    }
    let mut plan = cfg.extract.plan()?;
    plan.timesteps = ts.into_iter().collect();
    plan.selectors = kinds.into_iter().map(tapfuse_core::features::Selector::all).collect();
    Ok(plan)
}

/// Train and score every cell with one seed.
pub fn run_cells(cfg: &Config, cells: &[Cell], train: &ProbeData<F>, val: &ProbeData<F>, test: &ProbeData<F>, seed: u64) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let (tr, va, te) = (train.filter(|k| cell.keeps(k)), val.filter(|k| cell.keeps(k)), test.filter(|k| cell.keeps(k)));
        if tr.features.is_empty() {
            return Err(Error::Config(format!("cell {} selects no features", cell.name())));
        }
        let (probe, report) = fit_probe(cfg, cell.strategy(), seed, &tr, &va)?;
        let report = report?;
        let m = probe.evaluate(&te, cfg.probe.batch_size)?;
        let (kind, timestep) = match cell {
            Cell::Raw { timestep, kind } => (kind.tag().to_string(), Some(*timestep)),
            Cell::Reference { .. } => ("fusion".to_string(), None),
        };
        rows.push(AblationRow {
            name: cell.name(),
            kind,
            timestep,
            strategy: cell.strategy().name().into(),
            seed,
            best_epoch: report.best_epoch,
            val_score: report.best_val.score(),
            test_score: m.score(),
            test_accuracy: m.accuracy,
            test_miou: m.miou,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metric-vs-timestep chart with one line per module kind.
pub fn ablation_plot(rows: &[AblationRow], metric: &str) -> String {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(t) = r.timestep {
            series.entry(r.kind.clone()).or_default().push((t as f64, r.test_score));
        }
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = series
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect();
    viz::line_plot_svg("raw-feature probes across timesteps", "timestep", metric, &series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_checksum: String,
    pub backbone_checksum: String,
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

/// `ablate`: raw-feature grid plus reference strategies, one seed.
pub fn ablate(cfg: &Config, ws: &Workspace) -> Result<AblationReport> {
    let mut run = Run::start("ablate", cfg, ws);
    let cells = ablation_grid(cfg)?;
    let plan = ablation_plan(cfg, &cells)?;
    let bundle = load_bundle(ws)?;
    let data = prepare_data(cfg, ws)?;
    let dir = ws.ablate_dir();
    let paths = split_paths(&dir, "features_");
    let sum = bundle.checksum();
    let cached: Option<Vec<FeatureStack<F>>> = paths.iter().map(|p| load_features(p, &sum, &plan).ok()).collect();
    let feats = match cached {
        Some(v) => SplitFeatures { train: v[0].clone(), val: v[1].clone(), test: v[2].clone() },
        None => extract_splits(cfg, &bundle, &data, &plan, paths)?,
    };
    let train_ds = train_views(cfg, &data.splits.train)?;
    let (rows_idx, _) = label_subset(cfg, &data.splits.train)?;
    let train = probe_data(feats.train, &train_ds)?.subset(&rows_idx)?;
    let val = probe_data(feats.val, &data.splits.val)?;
    let test = probe_data(feats.test, &data.splits.test)?;
    let rows = run_cells(cfg, &cells, &train, &val, &test, cfg.seed)?;
    let metric = match train.task() {
        TaskKind::Segmentation => "mIoU",
        TaskKind::Classification => "accuracy",
        TaskKind::MultiLabel => "micro F1",
    };
    let csv_path = dir.join("ablate.csv");
    write_ablation_csv(&csv_path, &rows)?;
    let report = AblationReport { config_checksum: cfg.checksum(), backbone_checksum: sum.clone(), metric: metric.into(), rows };
    let json = dir.join("ablate.json");
    write_json(&json, &report)?;
    let svg = dir.join("timesteps.svg");
    viz::write_bytes(&svg, ablation_plot(&report.rows, metric).as_bytes())?;
    run.backbone_checksum = Some(sum);
    run.output(csv_path);
    run.output(json);
    run.output(svg);
    run.finish(&dir)?;
    Ok(report)
}

// ---------------------------------------------------------------- visualisation

/// Learned global weights of one scale, normalised by their maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub scale: usize,
    /// `block/kind` per row.
    pub rows: Vec<String>,
    pub timesteps: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn weight_maps(probe: &Probe<F>) -> Result<Vec<WeightMap>> {
    if probe.fusion.strategy != Strategy::Global {
        return Err(Error::Config(format!("weight maps need a global-fusion checkpoint, not {}", probe.fusion.strategy.name())));
    }
    let ws = probe.fusion.global_weights(&probe.store)?;
    Ok(probe
        .fusion
        .layout
        .scales
        .iter()
        .zip(ws)
        .map(|(sl, w)| {
            let raw: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
            WeightMap {
                scale: sl.scale,
                rows: sl.modules.iter().map(|(b, k, _)| format!("l{b}_{k}")).collect(),
                timesteps: sl.timesteps.clone(),
                normalized: viz::normalize_by_max(&raw),
                raw,
            }
        })
        .collect())
}

pub fn viz_weights(cfg: &Config, ws: &Workspace) -> Result<Vec<WeightMap>> {
    let mut run = Run::start("viz-weights", cfg, ws);
    let strategy = cfg.probe.strategy()?;
    if strategy != Strategy::Global {
        return Err(Error::Config(format!("viz-weights needs probe.strategy = \"global\", got {:?}", cfg.probe.strategy)));
    }
    let l = load_for_probe(cfg, ws)?;
    let probe = load_probe(cfg, ws, &l, strategy)?;
    let maps = weight_maps(&probe)?;
    let dir = ws.viz_dir("weights");
    for m in &maps {
        let cols: Vec<String> = m.timesteps.iter().map(|t| format!("t={t}")).collect();
        let svg = viz::heatmap_svg(&format!("scale {} global weights (|w| / max)", m.scale), &m.normalized, &m.rows, &cols, cfg.viz.cell_pixels.max(8));
        let p = dir.join(format!("weights_s{}.svg", m.scale));
        viz::write_bytes(&p, svg.as_bytes())?;
        run.output(p);
        let mut text = format!("module,{}\n", m.timesteps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","));
        for (i, r) in m.rows.iter().enumerate() {
            let vals: Vec<String> = m.normalized[i * m.timesteps.len()..(i + 1) * m.timesteps.len()].iter().map(|v| v.to_string()).collect();
            text.push_str(&format!("{r},{}\n", vals.join(",")));
        }
        let p = dir.join(format!("weights_s{}.csv", m.scale));
        viz::write_bytes(&p, text.as_bytes())?;
        run.output(p);
    }
    let p = dir.join("weights.json");
    write_json(&p, &maps)?;
    run.output(p);
    run.backbone_checksum = Some(l.bundle.checksum());
    run.finish(&dir)?;
    Ok(maps)
}

fn select_images(cfg: &Config, n: usize) -> Result<Vec<usize>> {
    if let Some(&i) = cfg.viz.images.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("viz image {i} outside the {n}-sample test split")));
    }
    Ok(cfg.viz.images.clone())
}

/// Fused pyramid levels `(C, h, w)` of one test image.
pub fn fused_maps(probe: &Probe<F>, features: &FeatureStack<F>, image: usize) -> Result<Vec<Tensor<F>>> {
    let one = features.select(&[image])?;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &probe.store, false);
    let out = probe.fusion.forward(&mut cx, &one)?;
    out.pyramid.iter().map(|&v| {
        let t = g.value(v).clone();
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(&s)?)
    }).collect()
}

fn to_f64(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Render `(C, h, w)` maps with one shared PCA basis and range, upsampled
/// to `size`.
pub fn render_shared(maps: &[Tensor<F>], size: (usize, usize)) -> Result<(Vec<Vec<u8>>, bool)> {
    let s = maps[0].shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut joined = Vec::with_capacity(maps.len() * c * h * w);
    // Stack panels side by side so one PCA covers every pixel.
    for ch in 0..c {
        for m in maps {
            joined.extend(to_f64(m)[ch * h * w..(ch + 1) * h * w].iter());
        }
    }
    let wide = maps.len() * h * w;
    let (rgb, gray) = viz::pca_rgb(&joined, c, 1, wide)?;
    let panels = (0..maps.len())
        .map(|i| {
            let panel = &rgb[i * h * w * 3..(i + 1) * h * w * 3];
            viz::resize_nearest(panel, 3, h, w, size.0, size.1)
        })
        .collect();
    Ok((panels, gray))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelIndex {
    pub strategy: String,
    pub projection: String,
    pub grayscale_fallback: bool,
    pub files: Vec<String>,
}

pub fn viz_features(cfg: &Config, ws: &Workspace) -> Result<PanelIndex> {
    let mut run = Run::start("viz-features", cfg, ws);
    let strategy = cfg.probe.strategy()?;
    let l = load_for_probe(cfg, ws)?;
    let probe = load_probe(cfg, ws, &l, strategy)?;
    let dir = ws.viz_dir("features").join(strategy.name());
    let mut files = Vec::new();
    let mut gray_any = false;
    for i in select_images(cfg, l.test.len())? {
        for (s, m) in fused_maps(&probe, &l.test.features, i)?.into_iter().enumerate() {
            let (panels, gray) = render_shared(std::slice::from_ref(&m), l.test.image_size)?;
            gray_any |= gray;
            let p = dir.join(format!("img{i}_s{}.png", s + 1));
            viz::write_rgb_png(&p, &panels[0], l.test.image_size.1, l.test.image_size.0)?;
            files.push(p.file_name().unwrap().to_string_lossy().into_owned());
            run.output(p);
        }
    }
    let index = PanelIndex { strategy: strategy.name().into(), projection: "pca3".into(), grayscale_fallback: gray_any, files };
    let p = dir.join("index.json");
    write_json(&p, &index)?;
    run.output(p);
    run.backbone_checksum = Some(l.bundle.checksum());
    run.finish(&dir)?;
    Ok(index)
}

/// Dense expert outputs and the routed result for one image, scale and
/// timestep.
pub struct ExpertPanels {
    /// `(C, h, w)` per expert, computed without top-k truncation.
    pub experts: Vec<Tensor<F>>,
    /// Gate values: `(E)` when pooled, `(E, h, w)` per pixel.
    pub gates: Tensor<F>,
    pub fused: Tensor<F>,
}

pub fn expert_panels(probe: &Probe<F>, features: &FeatureStack<F>, image: usize, scale_index: usize, t_index: usize) -> Result<ExpertPanels> {
    let (ScaleFusion::Moe { bank }, Some(sl)) = (&probe.fusion.scales.get(scale_index).cloned().unwrap_or(ScaleFusion::Concat), probe.fusion.layout.scales.get(scale_index))
    else {
        return Err(Error::Config(format!("expert panels need a mixture-of-experts checkpoint, not {}", probe.fusion.strategy.name())));
    };
    if t_index >= sl.timesteps.len() {
        return Err(Error::Config(format!("timestep index {t_index} outside {:?}", sl.timesteps)));
    }
    let one = features.select(&[image])?;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &probe.store, false);
    let inputs = probe.fusion.inputs(&mut cx, &one)?;
    let m = sl.modules.len();
    let x = cx.g.concat(&inputs[scale_index][t_index * m..(t_index + 1) * m], 1)?;
    let dense = bank.expert_outputs(&mut cx, x)?;
    let out = bank.forward(&mut cx, x)?;
    let squeeze = |t: &Tensor<F>| -> Result<Tensor<F>> { Ok(t.clone().reshape(&t.shape()[1..].to_vec())?) };
    Ok(ExpertPanels {
        experts: dense.iter().map(|&v| squeeze(g.value(v))).collect::<Result<_>>()?,
        gates: squeeze(g.value(out.gates))?,
        fused: squeeze(g.value(out.output))?,
    })
}

pub fn viz_experts(cfg: &Config, ws: &Workspace) -> Result<PanelIndex> {
    let mut run = Run::start("viz-experts", cfg, ws);
    let strategy = cfg.probe.strategy()?;
    if strategy != Strategy::Moe {
        return Err(Error::Config(format!("viz-experts needs probe.strategy = \"moe\", got {:?}", cfg.probe.strategy)));
    }
    let l = load_for_probe(cfg, ws)?;
    let probe = load_probe(cfg, ws, &l, strategy)?;
    let dir = ws.viz_dir("experts");
    let mut files = Vec::new();
    let mut gray_any = false;
    for i in select_images(cfg, l.test.len())? {
        for (si, sl) in probe.fusion.layout.scales.iter().enumerate() {
            for (ti, t) in sl.timesteps.iter().enumerate() {
                let p = expert_panels(&probe, &l.test.features, i, si, ti)?;
                let mut maps = p.experts.clone();
                maps.push(p.fused.clone());
                let (panels, gray) = render_shared(&maps, l.test.image_size)?;
                gray_any |= gray;
                for (k, px) in panels.iter().enumerate() {
                    let tag = if k < p.experts.len() { format!("expert{k}") } else { "fused".into() };
                    let path = dir.join(format!("img{i}_s{}_t{t}_{tag}.png", sl.scale));
                    viz::write_rgb_png(&path, px, l.test.image_size.1, l.test.image_size.0)?;
                    files.push(path.file_name().unwrap().to_string_lossy().into_owned());
                    run.output(path);
                }
            }
        }
    }
    let index = PanelIndex { strategy: strategy.name().into(), projection: "pca3".into(), grayscale_fallback: gray_any, files };
    let p = dir.join("index.json");
    write_json(&p, &index)?;
    run.output(p);
    run.backbone_checksum = Some(l.bundle.checksum());
    run.finish(&dir)?;
    Ok(index)
}

/// One self-attention row rendered over the input image.
pub struct AttentionView {
    /// Attention of the query over the scale's grid; sums to one.
    pub row: Vec<f64>,
    pub grid: (usize, usize),
    /// Interleaved RGB at the image size.
    pub overlay: Vec<u8>,
    pub size: (usize, usize),
}

/// Self-attention of the first decoder block at `scale`, for `query`
/// (row, col on the scale grid), after inverting `image` to `timestep`.
pub fn attention_view(bundle: &Bundle, image: &Tensor<F>, timestep: usize, scale: usize, query: (usize, usize), stride: usize) -> Result<AttentionView> {
    let (_, c, h, w) = image.dims4()?;
    let point = bundle
        .unet
        .tap_points()
        .into_iter()
        .find(|p| p.scale == scale && p.half == Half::Decoder && p.kind == ModuleKind::SelfAttention)
        .ok_or_else(|| Error::Config(format!("no decoder self-attention at scale {scale}")))?;
    let (gh, gw) = bundle.unet.config.scale_size(scale);
    if query.0 >= gh || query.1 >= gw {
        return Err(Error::Config(format!("query pixel {query:?} outside the {gh}x{gw} grid")));
    }
    bundle.schedule.check_timestep(timestep)?;
    let z = bundle.codec.encode(image)?;
    let states = ddim_invert(&z, &[timestep], &bundle.schedule, &bundle.unet, &bundle.context, stride.max(1))?;
    let mut req = TapRequest::none();
    req.attention_maps.insert(point);
    let (_, caps) = bundle.unet.predict(&states[&timestep], timestep, &bundle.context, &req)?;
    let map: &(TapPoint, Tensor<F>) = caps.attention_maps.first().ok_or_else(|| Error::Data("attention map was not captured".into()))?;
    let n = gh * gw;
    let q = query.0 * gw + query.1;
    let row: Vec<f64> = map.1.data()[q * n..(q + 1) * n].iter().map(|&v| v as f64).collect();
    let heat = viz::normalize_by_max(&row);
    let heat_bytes: Vec<u8> = heat.iter().map(|v| (v * 255.0).round() as u8).collect();
    let up: Vec<f64> = viz::resize_nearest(&heat_bytes, 1, gh, gw, h, w).iter().map(|&v| v as f64 / 255.0).collect();
    let img: Vec<f64> = image.data()[..c * h * w].iter().map(|&v| v as f64).collect();
    let rgb: Vec<f64> = if c >= 3 { img[..3 * h * w].to_vec() } else { (0..3).flat_map(|_| img[..h * w].iter().copied()).collect() };
    Ok(AttentionView { row, grid: (gh, gw), overlay: viz::overlay(&rgb, &up, h, w, 0.6), size: (h, w) })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionIndex {
    pub timestep: usize,
    pub scale: usize,
    pub query: [usize; 2],
    pub grid: (usize, usize),
    pub row_sums: Vec<f64>,
    pub files: Vec<String>,
}

pub fn viz_attention(cfg: &Config, ws: &Workspace) -> Result<AttentionIndex> {
    let mut run = Run::start("viz-attention", cfg, ws);
    let bundle = load_bundle(ws)?;
    let data = prepare_data(cfg, ws)?;
    let test = &data.splits.test;
    let dir = ws.viz_dir("attention");
    let (mut files, mut sums, mut grid) = (Vec::new(), Vec::new(), (0, 0));
    for i in select_images(cfg, test.len())? {
        let img = test.images.select_rows(&[i])?;
        let v = attention_view(&bundle, &img, cfg.viz.timestep, cfg.viz.scale, (cfg.viz.query[0], cfg.viz.query[1]), cfg.extract.inversion_stride)?;
        grid = v.grid;
        sums.push(v.row.iter().sum());
        let p = dir.join(format!("img{i}_t{}_s{}.png", cfg.viz.timestep, cfg.viz.scale));
        viz::write_rgb_png(&p, &v.overlay, v.size.1, v.size.0)?;
        files.push(p.file_name().unwrap().to_string_lossy().into_owned());
        run.output(p);
    }
    let index = AttentionIndex { timestep: cfg.viz.timestep, scale: cfg.viz.scale, query: cfg.viz.query, grid, row_sums: sums, files };
    let p = dir.join("index.json");
    write_json(&p, &index)?;
    run.output(p);
    run.backbone_checksum = Some(bundle.checksum());
    run.finish(&dir)?;
    Ok(index)
}

// ---------------------------------------------------------------- commands

/// `pretrain` command: data preparation, training and the run record.
pub fn cmd_pretrain(cfg: &Config, ws: &Workspace) -> Result<PretrainSummary> {
    let mut run = Run::start("pretrain", cfg, ws);
    let data = prepare_data(cfg, ws)?;
    let (bundle, summary) = pretrain(cfg, ws, &data)?;
    run.backbone_checksum = Some(bundle.checksum());
    run.output(ws.backbone());
    run.output(ws.out.join("pretrain.json"));
    run.output(ws.out.join("pretrain_loss.csv"));
    run.finish(&ws.out.join("pretrain"))?;
    Ok(summary)
}

pub fn cmd_extract(cfg: &Config, ws: &Workspace) -> Result<SplitFeatures> {
    let mut run = Run::start("extract", cfg, ws);
    let bundle = load_bundle(ws)?;
    let data = prepare_data(cfg, ws)?;
    let plan = cfg.extract.plan()?;
    let paths = ["train", "val", "test"].map(|s| ws.features(s));
    let feats = extract_splits(cfg, &bundle, &data, &plan, paths.clone())?;
    run.backbone_checksum = Some(bundle.checksum());
    for p in paths {
        run.output(p);
    }
    run.finish(&ws.out.join("features"))?;
    Ok(feats)
}

pub fn cmd_gen_data(cfg: &Config, ws: &Workspace) -> Result<Manifest> {
    let mut run = Run::start("gen-data", cfg, ws);
    let m = gen_data(cfg, ws)?;
    let root = ws.data_root(cfg);
    run.output(root.join(crate::datasets::MANIFEST));
    run.finish(&root)?;
    Ok(m)
}
