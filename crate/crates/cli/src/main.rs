//! `step-mi` command-line runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric
//! divergence, 3 property violation.

mod commands;
mod manifest;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use step_mi::ConfidenceMode;

#[derive(Debug, Parser)]
#[command(name = "step-mi", version, about = "MI-regularized chain-of-thought distillation at desk scale")]
struct Cli {
    /// Worker threads for data-parallel work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write a checkpoint and loss trajectory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, confidence, ECE, rationale quality.
    Eval(EvalArgs),
    /// Train one run per MI variant with a shared seed and tabulate them.
    Ablate(AblateArgs),
    /// Check exact MI and variational-bound properties on random joints.
    OracleCheck(OracleArgs),
    /// Aggregate run directories into metric and calibration-bin tables.
    Report(ReportArgs),
    /// Write a bundled synthetic dataset with its train/test split and config.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest and compare every output.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL dataset with `input`, `label`, `rationale` and optional `id`.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset name stored in the checkpoint (defaults to the file stem).
    #[arg(long)]
    pub dataset_name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    /// Token-overlap F1 against the gold rationale, mapped to 1..5.
    Overlap,
    /// Remote chat-completions judge (needs the `remote-judge` feature).
    Judge,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tag the report as out-of-domain relative to the training dataset.
    #[arg(long)]
    pub ood: bool,
    /// Override the checkpoint's sequence-confidence definition.
    #[arg(long)]
    pub confidence: Option<ConfidenceMode>,
    #[arg(long, value_enum, default_value_t = ScorerKind::Overlap)]
    pub scorer: ScorerKind,
    /// Base URL of the judge endpoint, e.g. `https://host/v1`.
    #[arg(long)]
    pub judge_url: Option<String>,
    #[arg(long)]
    pub judge_model: Option<String>,
    /// Judge requests per rationale; scores are averaged.
    #[arg(long, default_value_t = 4)]
    pub judge_repeats: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of max, mean, kl, none.
    #[arg(long, default_value = "max,mean,kl,none")]
    pub variants: String,
    /// Held-out dataset for the metric columns (defaults to the training data).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Run the variants concurrently; outputs are identical either way.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub max_dim: usize,
    /// JSON joint table (rows = z, columns = v), or a list of them, checked
    /// instead of random joints.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// Directory for the manifest and the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for run manifests.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write the tables (and a manifest) here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthTask {
    /// Label is the parity word of the input word count.
    Parity,
    /// Label is the first input word.
    Copy,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthTask::Parity)]
    pub task: SynthTask,
    #[arg(long, default_value_t = 400)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A `manifest.json` or the run directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the re-run writes (defaults to `<run dir>-replay`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses and runs one command line (without the program name).
pub fn dispatch(argv: &[String]) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("step-mi".to_string()).chain(argv.iter().cloned()))
        ?;
    if let Some(n) = cli.threads {
        // a second initialisation (replay) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train(a) => commands::train(&a, argv),
        Command::Eval(a) => commands::eval(&a, argv),
        Command::Ablate(a) => commands::ablate(&a, argv),
        Command::OracleCheck(a) => commands::oracle_check(&a, argv),
        Command::Report(a) => commands::report(&a, argv),
        Command::Synth(a) => commands::synth(&a, argv),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<clap::Error>() {
                let _ = c.print();
                return ExitCode::from(if c.use_stderr() { 1 } else { 0 });
            }
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
