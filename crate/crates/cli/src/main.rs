//! `evmae`: event-stream masked autoencoding from the command line.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ConfigArgs;
use crate::data::Split;

#[derive(Debug, Parser)]
#[command(name = "evmae", version, about = "Point-wise masked autoencoding for event-camera streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InputFormat {
    Auto,
    Csv,
    Aedat,
    Evb1,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert an event file (CSV, AEDAT 3.1 or EVB1) to EVB1 or CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: InputFormat,
        /// Sensor width; required for CSV input.
        #[arg(long)]
        width: Option<u32>,
        /// Sensor height; required for CSV input.
        #[arg(long)]
        height: Option<u32>,
        /// Output file; a `.csv` extension selects CSV, anything else EVB1.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut an event file into resampled windows, one CSV per window.
    Windows {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Group one window file into patches.
    Patches {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a labeled synthetic motion-direction data set.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON synth config; fields missing from it take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        inlier_rate: Option<f64>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-autoencoder pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classification fine-tuning from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of classes; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
        /// Train on every labeled window instead of the training split.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy and cross-entropy of a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export input, masked input and reconstruction of one window.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Masking ratio.
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Center-method and threshold ablations as a CSV table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Center methods to compare.
        #[arg(long, value_delimiter = ',', default_value = "inlier,fps,random")]
        methods: Vec<evmae::CenterMethod>,
        /// Inlier thresholds to sweep.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Seed of the masks used for held-out scoring.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Directory of `<setting>-seed<seed>.evmc` checkpoints.
        #[arg(long)]
        ckpt_dir: PathBuf,
        /// Pre-train the checkpoints into `--ckpt-dir` instead of loading them.
        #[arg(long)]
        train: bool,
        /// Also fine-tune each model and report held-out accuracy (needs labels).
        #[arg(long)]
        accuracy: bool,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest {
            input,
            format,
            width,
            height,
            out,
        } => commands::ingest(&input, format, width.zip(height), &out),
        Command::Windows { input, out, cfg } => commands::windows(&input, &out, &cfg),
        Command::Patches { input, out, cfg } => commands::patches(&input, &out, &cfg),
        Command::Synth {
            classes,
            samples,
            seed,
            config,
            duration,
            inlier_rate,
            noise_rate,
            out,
        } => commands::synth(
            commands::SynthArgs {
                classes,
                samples,
                seed,
                config,
                duration,
                inlier_rate,
                noise_rate,
            },
            &out,
        ),
        Command::Pretrain { data, out, cfg } => commands::pretrain(&data, &out, &cfg),
        Command::Finetune {
            ckpt,
            data,
            out,
            classes,
            all,
            cfg,
        } => commands::finetune(&ckpt, &data, &out, classes, all, &cfg),
        Command::Eval { ckpt, data, split, cfg } => commands::eval(&ckpt, &data, split, &cfg),
        Command::Reconstruct {
            ckpt,
            input,
            alpha,
            out,
            cfg,
        } => commands::reconstruct(&ckpt, &input, alpha, &out, &cfg),
        Command::Ablate {
            data,
            methods,
            thresholds,
            seeds,
            eval_seed,
            ckpt_dir,
            train,
            accuracy,
            out,
            cfg,
        } => commands::ablate(
            commands::AblateArgs {
                methods,
                thresholds,
                seeds,
                eval_seed,
                train,
                accuracy,
            },
            &data,
            &ckpt_dir,
            out.as_deref(),
            &cfg,
        ),
    };
    if let Err(e) = result {
        log::error!("{e}");
        std::process::exit(e.exit_code());
    }
}
