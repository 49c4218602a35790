//! Command-line surface: synthetic dataset generation, training, image
//! translation (age progression/regression) and quantitative evaluation.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agecycle", version, about = "Age progression and regression with attention-guided cyclic GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Direction {
    Progress,
    Regress,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeKind {
    /// Ten-year bins matching the synthetic corpus (uses --groups).
    Decades,
    /// 30-, 31-40, 41-50, 51+.
    Morph,
    /// Nine bins from 0-3 up to 81+.
    Utkface,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the procedural face dataset and its manifest CSV.
    SynthData(SynthArgs),
    /// Train the paired generators and discriminators.
    Train(TrainArgs),
    /// Translate images across age groups with a trained checkpoint.
    Translate(TranslateArgs),
    /// Evaluate a checkpoint: age translation accuracy and identity scores.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for images and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub subjects: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Manifest CSV, or a directory of AGE_-prefixed images with --age-encoded.
    #[arg(long)]
    pub data: PathBuf,
    /// Treat --data as a directory with filename-encoded ages.
    #[arg(long)]
    pub age_encoded: bool,
    /// Output directory for checkpoints, logs and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML config; CLI flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Number of age groups (with --scheme decades).
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, value_enum, default_value_t = SchemeKind::Decades)]
    pub scheme: SchemeKind,
    /// Ablation: bypass the attention branch ("w/o ATT").
    #[arg(long)]
    pub no_attention: bool,
    /// Ablation: sample training pairs in either age direction ("w/o OI").
    #[arg(long)]
    pub unordered_input: bool,
    /// Override the activation-loss weight after calibration (0 disables it).
    #[arg(long)]
    pub lambda_actv: Option<f64>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single image or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Age group of the input image(s).
    #[arg(long)]
    pub source_group: usize,
    #[arg(long, value_enum)]
    pub direction: Direction,
    /// Comma-separated target groups, e.g. "1,2,3".
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export attention maps as a second grid row (mask×255).
    #[arg(long)]
    pub export_attention: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest CSV, or a directory of AGE_-prefixed images with --age-encoded.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub age_encoded: bool,
    #[arg(long, value_enum, default_value_t = SchemeKind::Decades)]
    pub scheme: SchemeKind,
    #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
    pub backend: BackendKind,
    /// Remote estimator endpoint (with --backend remote).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Verification threshold on the [0, 100] confidence.
    #[arg(long, default_value_t = agecycle::eval::DEFAULT_VERIFY_THRESHOLD)]
    pub threshold: f64,
    /// Output directory for the JSON report and table.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthData(args) => commands::synth_data(args),
        Command::Train(args) => commands::train(args),
        Command::Translate(args) => commands::translate(args),
        Command::Eval(args) => commands::eval(args),
    }
}
