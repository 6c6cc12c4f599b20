use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use interlight::config::TrainConfig;
use interlight::image_io::load_png;
use interlight::metrics::MetricSpace;
use interlight::pipeline::infer::Enhancer;
use interlight::pipeline::toydata::make_toy_dataset;
use interlight::pipeline::train::train;

#[derive(Parser)]
#[command(name = "interlight", version, about = "Low-light image enhancement: train, enhance, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Full-size schedule: 1500 epochs, batch 8, 256px crops
        #[arg(long)]
        full_scale: bool,
        /// Override the dataset root
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the output directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Enhance every PNG in a directory
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a paired low/high dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// rgb or y (BT.601 luma)
        #[arg(long, default_value = "rgb")]
        metric_space: MetricSpace,
    },
    /// Print prompt, gate and memory diagnostics for one image as JSON
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Write a synthetic paired dataset
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the default training config as TOML
    Config {
        #[arg(long)]
        full_scale: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, full_scale, data, out, epochs, max_steps } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if full_scale {
                cfg = cfg.full_scale();
            }
            if let Some(d) = data {
                cfg.data.root = d;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            cfg.validate()?;
            let summary = train::<f32>(&cfg, |rec| {
                log::debug!("step {} loss {:.5} lr {:.3e}", rec.step, rec.loss, rec.lr);
            })
            .with_context(|| format!("training into {}", cfg.out_dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Enhance { ckpt, input, out } => {
            let enhancer = Enhancer::<f32>::from_checkpoint(&ckpt)?;
            let summary = enhancer.enhance_dir(&input, &out)?;
            eprintln!("wrote {} images, skipped {}", summary.written.len(), summary.skipped.len());
        }
        Command::Eval { ckpt, data, report, metric_space } => {
            let enhancer = Enhancer::<f32>::from_checkpoint(&ckpt)?;
            let r = enhancer.evaluate(&data, metric_space)?;
            r.write(&report)?;
            eprintln!("{} images: PSNR {:.3} dB, SSIM {:.4}", r.aggregate.count, r.aggregate.mean_psnr, r.aggregate.mean_ssim);
        }
        Command::Inspect { ckpt, image } => {
            let enhancer = Enhancer::<f32>::from_checkpoint(&ckpt)?;
            let img = load_png(&image)?;
            let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            println!("{}", serde_json::to_string_pretty(&enhancer.inspect(&img, &name)?)?);
        }
        Command::Toydata { out, n, seed } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            make_toy_dataset(&out, n, seed)?;
            eprintln!("wrote {n} pairs to {}", out.display());
        }
        Command::Config { full_scale } => {
            let cfg = if full_scale { TrainConfig::default().full_scale() } else { TrainConfig::default() };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
