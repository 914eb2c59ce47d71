use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tapfuse::config::Config;
use tapfuse::pipeline::{self, Workspace};
use tapfuse::{Error, Result};

/// Default output directory when `--out` is absent.
const OUT_ENV: &str = "TAPFUSE_OUT";

#[derive(Debug, Parser)]
#[command(name = "tapfuse", version, about = "Probe frozen diffusion-model features with multi-timestep fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set probe.strategy=moe`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $TAPFUSE_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Device::Cpu, global = true)]
    device: Device,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
    Gpu,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset.
    GenData,
    /// Train the toy denoiser and freeze it.
    Pretrain,
    /// Dump backbone features of every split.
    Extract,
    /// Train the configured probe on dumped features.
    Train,
    /// Score a trained probe checkpoint.
    Eval,
    /// Raw-feature sweep over timesteps and module kinds plus fusion references.
    Ablate,
    /// Heatmaps of learned global fusion weights.
    VizWeights,
    /// PCA renderings of fused feature maps.
    VizFeatures,
    /// PCA renderings of each expert's dense output.
    VizExperts,
    /// Self-attention row of one query pixel over the image.
    VizAttention,
}

fn config(cli: &Cli) -> Result<Config> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    if cli.device == Device::Gpu {
        eprintln!("warning: no GPU backend in this build; running on the CPU");
    }
    let ws = Workspace::new(out_dir(cli));
    match cli.command {
        Command::GenData => {
            let m = pipeline::cmd_gen_data(&cfg, &ws)?;
            println!("wrote {} samples ({}) to {}", m.records.len(), m.task, ws.data_root(&cfg).display());
        }
        Command::Pretrain => {
            let s = pipeline::cmd_pretrain(&cfg, &ws)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("pretrained {} steps, loss {} -> {}, backbone {}", s.steps, fmt(s.first_100_mean), fmt(s.last_100_mean), &s.backbone_checksum[..12]);
        }
        Command::Extract => {
            let f = pipeline::cmd_extract(&cfg, &ws)?;
            println!("extracted {} feature tensors per split ({} / {} / {} samples)", f.train.len(), f.train.batch_size().unwrap_or(0), f.val.batch_size().unwrap_or(0), f.test.batch_size().unwrap_or(0));
        }
        Command::Train => {
            let m = pipeline::train(&cfg, &ws)?;
            let test = m.test.as_ref().map_or(f64::NAN, |t| t.score);
            println!("{}: best epoch {}, val {:.4}, test {:.4}", m.strategy, m.best_epoch, m.val.score, test);
        }
        Command::Eval => {
            let r = pipeline::evaluate(&cfg, &ws)?;
            println!("{}: val {:.4}, test {:.4}", r.strategy, r.val.score, r.test.score);
        }
        Command::Ablate => {
            let r = pipeline::ablate(&cfg, &ws)?;
            for row in &r.rows {
                println!("{:<16} {} {:.4}", row.name, r.metric, row.test_score);
            }
        }
        Command::VizWeights => {
            let maps = pipeline::viz_weights(&cfg, &ws)?;
            println!("wrote {} weight maps", maps.len());
        }
        Command::VizFeatures => {
            let idx = pipeline::viz_features(&cfg, &ws)?;
            println!("wrote {} feature panels", idx.files.len());
        }
        Command::VizExperts => {
            let idx = pipeline::viz_experts(&cfg, &ws)?;
            println!("wrote {} expert panels", idx.files.len());
        }
        Command::VizAttention => {
            let idx = pipeline::viz_attention(&cfg, &ws)?;
            println!("wrote {} attention overlays", idx.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
