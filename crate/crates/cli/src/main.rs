//! `semco`: synthesize data, split, train, evaluate, and search.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAINING: u8 = 4;

#[derive(Parser)]
#[command(name = "semco", version, about = "Sparse contrastive cold-start recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth(SynthArgs),
    /// Make a cold-start split of a dataset.
    Split(SplitArgs),
    /// Train one model per configured seed.
    Train(TrainArgs),
    /// Evaluate checkpoints on a split's cold items.
    Eval(EvalArgs),
    /// Grid or random hyperparameter search.
    Search(SearchArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub users: usize,
    #[arg(long, default_value_t = 400)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub topics: usize,
    /// Comma-separated feature dimension per mode.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 24])]
    pub modes: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long = "per-user", default_value_t = 20)]
    pub per_user: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dirichlet concentration of topic mixtures.
    #[arg(long, default_value_t = 0.2)]
    pub concentration: f64,
    /// Sharpness of the user-item affinity.
    #[arg(long, default_value_t = 20.0)]
    pub affinity: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Run config providing the dataset and split parameters.
    #[arg(long, conflicts_with_all = ["dataset", "cold_frac"])]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<PathBuf>,
    #[arg(long = "cold-frac")]
    pub cold_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<config out>/split` with `--config`.
    #[arg(long, required_unless_present = "config")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Base,
    Offline,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlphaArg {
    Softmax,
    Entmax15,
    Sparsemax,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `offline`/`online` when the config has a distill section
    /// with that mode, `base` otherwise.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Overrides the config's alpha.
    #[arg(long, value_enum)]
    pub alpha: Option<AlphaArg>,
    /// Pretrained teacher checkpoint for offline distillation.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; repeat to average over runs.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Split directory written by `split` or `train`.
    #[arg(long)]
    pub split: PathBuf,
    /// Cutoff; repeat for several.
    #[arg(long, default_values_t = [20])]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = PoolArg::Test)]
    pub pool: PoolArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Train every combination of the grid axes.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub grid: bool,
    /// Train this many uniformly sampled configurations.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Marks an error raised while optimizing, as opposed to bad input.
#[derive(Debug)]
pub struct TrainingFailed(pub semco::Error);

impl fmt::Display for TrainingFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed: {}", self.0)
    }
}

impl std::error::Error for TrainingFailed {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.0)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<TrainingFailed>().is_some() {
            return EXIT_TRAINING;
        }
        if let Some(e) = cause.downcast_ref::<semco::Error>() {
            return match e {
                e if e.is_data_error() => EXIT_DATA,
                semco::Error::Training(_) | semco::Error::NonFinite(_) => EXIT_TRAINING,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Search(a) => commands::search(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
