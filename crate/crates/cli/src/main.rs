//! `ucmnet`: train, evaluate, run and profile UCM-Net segmentation models.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "ucmnet", version, about = "UCM-Net skin-lesion segmentation")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply to absent keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the manifest's train split, scoring the test split each epoch.
    Train {
        /// Override `epochs`.
        #[arg(long)]
        epochs: Option<u64>,
        /// Override `manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Override `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a weight or checkpoint file on one split (batch 1, eval mode).
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: ucmnet::data::Split,
        /// Metrics CSV to write.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Segment one image into a 0/255 PNG at the image's own size.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter, FLOP and memory report for the configured network.
    Profile {
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameters and GFLOPs of the three block variants side by side.
    Ablate,
    /// Assign unassigned manifest records to train/test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train fraction; defaults to `split_ratio`.
        #[arg(long)]
        ratio: Option<f64>,
        /// Defaults to `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Train { epochs, manifest, out } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate().map_err(|m| Failure::config(format!("config error: {m}")))?;
            commands::train(&cfg)
        }
        Command::Eval { weights, manifest, split, out } => {
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            commands::eval(&cfg, &weights, split, &out)
        }
        Command::Predict { weights, image, out } => commands::predict(&cfg, &weights, &image, &out),
        Command::Profile { csv } => commands::profile(&cfg, csv.as_deref()),
        Command::Ablate => commands::ablate(&cfg),
        Command::Split { manifest, out, ratio, seed } => {
            commands::split(&manifest, &out, ratio.unwrap_or(cfg.split_ratio), seed.unwrap_or(cfg.seed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ucmnet: {}", f.msg);
            ExitCode::from(f.code as u8)
        }
    }
}
