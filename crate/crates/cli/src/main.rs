use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

/// Adversarial training, evaluation and analysis on small CPU networks.
#[derive(Debug, Parser)]
#[command(name = "dajat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `train.beta=6`; later ones win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Training checkpoint to read.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which weights of the checkpoint: model, ema or best.
    #[arg(long, default_value = "ema")]
    weights: String,
    /// Evaluate on the first N test samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with ACAT or DAJAT.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Complex views per sample (DAJAT).
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bn_variant: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Clean, FGSM, PGD, targeted and transfer accuracy of the live and averaged weights.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Independently trained checkpoint for transfer attacks.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "20,100")]
        pgd_steps: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        restarts: Vec<usize>,
    },
    /// PGD accuracy over a grid of radii and step counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Radii in 1/255 units.
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,8,16,32,64")]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "7")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// untargeted, least_likely or random_class.
        #[arg(long, default_value = "untargeted")]
        mode: String,
    },
    /// Cosine similarity of the two batch-norm sets per layer.
    AnalyzeBn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "model")]
        weights: String,
    },
    /// Histogram and patch distances of augmented images to their sources.
    AnalyzeAug {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
    /// Loss over a plane through one test image.
    LossSurface {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Half-width of the grid in 1/255 units.
        #[arg(long, default_value_t = 16.0)]
        radius: f64,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
    },
    /// The six gradient-masking checks.
    Sanity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Render metrics or sweep files.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
