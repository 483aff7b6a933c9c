//! `molang`: dataset synthesis, two-stage training, finetuning, evaluation,
//! ablations and embedding export.
//!
//! Exit codes: 0 success, 2 usage / config / IO / checkpoint error,
//! 3 numerical failure (a non-finite loss or gradient).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use molang::motion::Preset;

#[derive(Parser, Debug)]
#[command(
    name = "molang",
    version,
    about = "Motion-language representation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural benchmark: clip files plus train/test manifests.
    Synth(SynthArgs),
    /// Masked motion prediction pretraining of the motion encoder.
    Pretrain(TrainArgs),
    /// Contrastive motion-text training with auxiliary reconstruction.
    Train(TrainArgs),
    /// Contrastive finetuning on class labels.
    Finetune(TrainArgs),
    /// Recognition or retrieval evaluation; prints metrics JSON.
    Eval(EvalArgs),
    /// Train and evaluate the {MMP, GCB, CstAR} toggle grid.
    Ablate(AblateArgs),
    /// Export unit-norm motion embeddings as CSV.
    Embed(EmbedArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic spec JSON; the built-in eight-class spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config overlaid on the preset defaults; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Training manifest (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Build the motion encoder without the graph convolutional bottleneck.
    #[arg(long)]
    pub no_gcb: bool,
    /// Drop the auxiliary reconstruction term (alpha = 0).
    #[arg(long)]
    pub no_recon: bool,
    /// Disable span masking of training inputs.
    #[arg(long)]
    pub no_masking: bool,
    /// Pretrained motion checkpoint (`train` only).
    #[arg(long)]
    pub motion_ckpt: Option<PathBuf>,
    /// Contrastive checkpoint to start from (`finetune` only).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Recognition,
    Retrieval,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for CSV and text artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated label texts for recognition; defaults to the dataset labels.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Distinct labels used to compose retrieval questions.
    #[arg(long, default_value_t = molang::train::eval::DESK_RETRIEVAL_LABELS)]
    pub retrieval_labels: usize,
    #[arg(long, default_value_t = molang::train::eval::DESK_RETRIEVAL_QUESTIONS)]
    pub questions: usize,
    /// Seed for composing retrieval questions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Directory holding `train.jsonl` and `test.jsonl` (as written by `synth`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Components to toggle; the others stay on.
    #[arg(long, value_delimiter = ',', default_value = "mmp,gcb,cstar")]
    pub grid: Vec<String>,
    /// Number of seeds (0, 1, ...).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub pretrain_epochs: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV: id, label, then one column per embedding component.
    #[arg(long)]
    pub out: PathBuf,
}

/// Reads `MOLANG_THREADS` (data-loading workers, default 1).
pub fn data_workers() -> usize {
    std::env::var("MOLANG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<molang::Error>(),
            Some(molang::Error::NonFinite(_))
        )
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::train(molang::train::Stage::MmpPretrain, &a),
        Command::Train(a) => commands::train(molang::train::Stage::Contrastive, &a),
        Command::Finetune(a) => commands::train(molang::train::Stage::Finetune, &a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Embed(a) => commands::embed(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
