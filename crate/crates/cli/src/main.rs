//! `omnifuse`: data generation, pretraining, fine-tuning, probing,
//! evaluation, verification and reporting.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2
//! configuration error, 3 I/O or data format error.

mod report;
mod run;
mod settings;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use omnifuse_core::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Config(String),
    Io(PathBuf, std::io::Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Io(p, e) => write!(f, "I/O error at {}: {e}", p.display()),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(..) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::ConfigMismatch { .. } | Error::Invalid(_) | Error::Version { .. } => 2,
                Error::Io { .. } | Error::Format { .. } | Error::MissingTile(_) | Error::Json(_) => 3,
                Error::Shape(_) | Error::LabelAccess(_) | Error::NonFinite(_) => 1,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "omnifuse", version, about = "Self-supervised multimodal fusion for Earth-observation tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData(GenArgs),
    /// Self-supervised pretraining on the unlabeled train split.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning of all parameters.
    Finetune(TrainArgs),
    /// Train a linear head on frozen features of a checkpoint.
    Probe(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the built-in oracle, gradient and placement checks.
    Verify(VerifyArgs),
    /// Summarise metric logs of several runs into a table and plots.
    Report(ReportArgs),
    /// Print configuration defaults.
    Config(ConfigArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// TOML run file; its `[generate]` and `[splits]` sections apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of tiles (overrides the file).
    #[arg(long)]
    pub tiles: Option<usize>,
    /// Number of classes (overrides the file).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run file; its `[train]` section and `data`/`out` keys apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialise from this checkpoint (required for probing).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Continue an interrupted run of the same phase from its checkpoint.
    #[arg(long, conflicts_with = "from")]
    pub resume: Option<PathBuf>,
    /// Epoch cap of this phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate of this phase.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Tiles per batch.
    #[arg(long)]
    pub batch_tiles: Option<usize>,
    /// Share of labeled training tiles used (e.g. 0.1, 0.2, 1.0).
    #[arg(long)]
    pub labels_fraction: Option<f64>,
    /// Comma-separated modality subset used for fine-tuning and scoring.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// Comma-separated ablations: no-bypass, no-date-filter, no-contrastive,
    /// naive-contrastive, no-reconstruction, spatial-mask, modality-mask, abs-pos.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Embedding width (fresh models only).
    #[arg(long)]
    pub d: Option<usize>,
    /// Fusion blocks (fresh models only).
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Attention heads (fresh models only).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Record wall-clock seconds in the metrics log.
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// TOML run file; its `[train]` section and `data`/`out` keys apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to score.
    #[arg(long)]
    pub from: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated modality subset.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// Output directory for `eval.json` and the metrics record.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Random instances per oracle check.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Deliberately corrupt one computation to exercise failure reporting.
    #[arg(long, value_parser = ["grad"])]
    pub inject_fault: Option<String>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories (each holding `metrics.jsonl`).
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for `report.md` and the SVG plots.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Print every default as a TOML run file.
    #[arg(long)]
    pub dump_defaults: bool,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("OMNIFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("OMNIFUSE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => run::gen_data(&a),
        Command::Pretrain(a) => run::pretrain_cmd(&a),
        Command::Finetune(a) => run::finetune_cmd(&a, false),
        Command::Probe(a) => run::finetune_cmd(&a, true),
        Command::Eval(a) => run::eval_cmd(&a),
        Command::Verify(a) => verify::run(&a),
        Command::Report(a) => report::run(&a),
        Command::Config(a) => {
            if a.dump_defaults {
                print!("{}", settings::dump_defaults()?);
                Ok(())
            } else {
                Err(CliError::Config("nothing to do; pass --dump-defaults".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
