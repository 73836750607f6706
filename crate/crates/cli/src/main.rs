//! `fmr`: generate data, train with or without feature-entropy
//! regularization, and run the diagnostic reports.
//!
//! Settings resolve as command-line flags over the `--config` file over
//! built-in defaults. Every command writes the fully resolved settings to
//! `<out>/config.json` next to its outputs. Set `FMR_LOG` to `error`,
//! `info` (default) or `debug`.

mod analyze;
mod config;
mod gen_data;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fmr_core::data::Split;
use fmr_core::training::Regularizer;

#[derive(Debug, Parser)]
#[command(
    name = "fmr",
    version,
    about = "Feature magnitude regularization experiments"
)]
#[command(
    after_help = "Precedence: flags > --config file > built-in defaults.\n\
                        Logging: FMR_LOG=error|info|debug."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (feature CSVs or glyph image archives).
    GenData(GenDataArgs),
    /// Train a model and write metrics, checkpoints and a result summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its train and test splits.
    Eval(EvalArgs),
    /// Diagnostic reports on checkpoints or raw features.
    Analyze {
        #[command(subcommand)]
        report: AnalyzeCommand,
    },
    /// Static-coefficient sweep with an optional dynamic reference.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Biased,
    Glyph,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Generator config (JSON). Every field is required when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "biased")]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config (JSON); missing fields take defaults.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// none | fmr-dynamic[:BETA] | fmr-static:LAMBDA | maxent-logits:WEIGHT
    #[arg(long, conflicts_with = "resume")]
    regularizer: Option<Regularizer>,
    #[arg(long, conflicts_with = "resume")]
    epochs: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    label_fraction: Option<f64>,
    /// Write `ckpt-<step>` every N steps.
    #[arg(long, conflicts_with = "resume")]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint; its stored config is used as is.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data source (JSON) replacing the one stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct ModelSource {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data source (JSON) replacing the one stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Histogram of per-dimension mean |feature|.
    Histogram {
        /// Backbone features of this checkpoint.
        #[arg(long, required_unless_present = "csv", conflicts_with = "csv")]
        checkpoint: Option<PathBuf>,
        /// Raw feature CSV, no model.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen train features, scored on the test split.
    Probe {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Top-k overlap of train- and test-split probe rankings, per checkpoint.
    Overlap {
        /// One or more checkpoints; one CSV each.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        ks: Vec<usize>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class top-k dimension-wise contribution report.
    Dcv {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Class activation map of one sample, plus dataset-level glyph heat.
    Cam {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Defaults to the sample's label.
        #[arg(long)]
        class: Option<usize>,
        /// Restrict to the class's top-k contribution dimensions.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 500)]
    probe_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    probe_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    probe_weight_decay: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Base training config (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated static coefficients, e.g. `10,100,1000`.
    #[arg(long, default_value = "")]
    lambdas: String,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Add the dynamic schedule (default beta 50).
    #[arg(long, num_args = 0..=1, default_missing_value = "50")]
    dynamic: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FMR_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Eval(args) => train::eval(args),
        Command::Analyze { report } => analyze::run(report),
        Command::Sweep(args) => sweep::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
