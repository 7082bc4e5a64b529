//! Command-line front end: dataset generation, priors, training, evaluation,
//! single-image inference and gradient checks.

pub mod commands;
pub mod config;
pub mod error;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "iidlab", version, about = "Intrinsic image decomposition toolkit")]
pub struct Cli {
    /// JSON run configuration; every omitted field takes its default
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config field, e.g. `--set train.lr=1e-3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset into paths.data_dir
    Synth {
        /// Number of scenes
        #[arg(long)]
        count: usize,
    },
    /// Write prior maps (PFM and PNG) for every sample of a manifest
    Priors {
        /// Defaults to <data_dir>/manifest.json
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to <data_dir>/priors
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the train split; outputs go to paths.out_dir
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
        /// Continue from <out_dir>/checkpoint.bin
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split, or compute WHDR against judgments
    Eval(EvalArgs),
    /// Decompose one image with a trained checkpoint
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Segment label PNG with its JSON sidecar; defaults to one segment
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and loss
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone, Copy, Default)]
pub struct AblationFlags {
    /// Image encoder only, no prior inputs
    #[arg(long)]
    pub no_priors: bool,
    /// Drop the edge decoder and attention
    #[arg(long)]
    pub no_edge_module: bool,
    /// Feed edges detected on the input image instead of predicted ones
    #[arg(long)]
    pub image_edges: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself (sanity pass, all zeros)
    #[arg(long, conflicts_with = "checkpoint")]
    pub gt_bypass: bool,
    /// Defaults to <data_dir>/manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Judgment file; switches to WHDR mode
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Image to decompose for WHDR (needs --checkpoint)
    #[arg(long, requires = "judgments")]
    pub image: Option<PathBuf>,
    /// Precomputed reflectance (PNG or PFM) to score for WHDR
    #[arg(long, requires = "judgments", conflicts_with = "image")]
    pub reflectance: Option<PathBuf>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line; the string is what goes to stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth { count } => commands::synth(&cfg, count),
        Command::Priors { manifest, out } => commands::priors(&cfg, manifest, out),
        Command::Train { manifest, ablation, resume } => commands::train(&cfg, manifest, ablation, resume),
        Command::Eval(args) => commands::eval(&cfg, args),
        Command::Infer { checkpoint, image, segments, out } => commands::infer(&checkpoint, &image, segments, &out),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    }
}
