#![allow(dead_code)]

use std::path::Path;

use tapfuse::config::Config;
use tapfuse::pipeline::{self, Workspace};

/// Small enough that a full gen/pretrain/extract cycle takes seconds.
pub fn tiny(extra: &[&str]) -> Config {
    let mut o: Vec<String> = [
        "data.train=12",
        "data.val=4",
        "data.test=4",
        "data.image_size=16",
        "data.num_classes=3",
        "backbone.channels=[8,8,8,8]",
        "backbone.pretrain_steps=20",
        "backbone.pretrain_batch=4",
        "extract.timesteps=[1,100]",
        "extract.inversion_stride=50",
        "probe.epochs=2",
        "probe.batch_size=4",
        "probe.d_out=[8,8,8,8]",
        "probe.fpn_channels=8",
        "probe.num_experts=3",
        "ablate.timesteps=[1,900]",
        "viz.query=[1,1]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    Config::default().with_overrides(&o).unwrap()
}

/// Dataset, backbone and features under `dir`.
pub fn world(cfg: &Config, dir: &Path) -> Workspace {
    let ws = Workspace::new(dir);
    pipeline::cmd_gen_data(cfg, &ws).unwrap();
    pipeline::cmd_pretrain(cfg, &ws).unwrap();
    pipeline::cmd_extract(cfg, &ws).unwrap();
    ws
}
