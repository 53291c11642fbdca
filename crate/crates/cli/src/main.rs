//! `dhumor`: one binary for the whole pipeline.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

mod commands;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use dhumor_core::evalstats::WeightScheme;
use dhumor_core::{StreamSet, Task};

#[derive(Debug, Parser)]
#[command(name = "dhumor", version, about = "Dark humor meme analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label counts per split in the dataset summary layout.
    Stats(StatsArgs),
    /// Generate and refine structured explanations with a vision-language model.
    Explain(ExplainArgs),
    /// Write embedding files from raw f32 matrices or a synthetic corpus.
    EmbedImport(EmbedImportArgs),
    /// Train a classifier on the train split.
    Train(TrainArgs),
    /// Evaluate a trained run on a split.
    Eval(EvalArgs),
    /// Retrain with each stream removed and compare against the full model.
    Ablate(AblateArgs),
    /// Inter-annotator agreement from a CSV of labels.
    Agreement(AgreementArgs),
    /// Check analytic gradients against finite differences on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("backend").required(true).args(["endpoint", "vlm_config"])))]
struct ExplainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding the meme images [default: the manifest's directory]
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Endpoint URL, or `mock:<script.json>` for a scripted offline run
    #[arg(long)]
    endpoint: Option<String>,
    /// TOML file with a `[vlm]` table
    #[arg(long)]
    vlm_config: Option<PathBuf>,
    /// Similarity at which refinement stops
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Role-reversal rounds per meme
    #[arg(long, default_value_t = 5)]
    max_iters: u32,
    /// Send the image only with the initial prompt
    #[arg(long)]
    no_resend_image: bool,
    /// Only the first N records
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "raw_dir"])))]
struct EmbedImportArgs {
    /// Generate a labelled synthetic corpus (manifest plus embeddings)
    #[arg(long)]
    synthetic: bool,
    /// Directory of `{id}.text.f32`, `{id}.reasoning.f32`, `{id}.image.f32`
    #[arg(long, requires = "manifest")]
    raw_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for embedding files (raw import)
    #[arg(long, requires = "raw_dir")]
    embeddings_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    test_samples: usize,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value = "dh")]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the synthetic corpus
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

/// Training flags; each overrides the config file, which overrides the
/// defaults.
#[derive(Debug, Clone, Args)]
struct TrainFlags {
    /// TOML training config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Streams to keep, e.g. `tir` or `ti`
    #[arg(long)]
    streams: Option<StreamSet>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    /// One attention trunk with a head per task
    #[arg(long)]
    shared_trunk: bool,
}

#[derive(Debug, Args)]
struct DataFlags {
    #[arg(long)]
    manifest: PathBuf,
    /// [default: `embeddings/` next to the manifest]
    #[arg(long)]
    embeddings_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Which {
    Final,
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for dhumor_core::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => dhumor_core::Split::Train,
            SplitArg::Test => dhumor_core::Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataFlags,
    /// A directory written by `train`
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "final")]
    checkpoint: Which,
    /// [default: the task in the run's config]
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated tasks
    #[arg(long, value_delimiter = ',', default_value = "dh,target,intensity")]
    tasks: Vec<Task>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AgreementArgs {
    /// CSV with a header row: id, then one column per annotator
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    task: Task,
    /// Weighting for the ordinal intensity task
    #[arg(long, default_value = "quadratic")]
    weighted_scheme: WeightScheme,
    /// Also write agreement.json here
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    tokens: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value = "intensity")]
    task: Task,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(errors::exit_code(&e))
        }
    }
}
