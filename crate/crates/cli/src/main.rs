//! `vitamin`: analyze | train | eval | sweep.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numeric
//! failure at runtime.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vitamin", version, about = "Hybrid conv-transformer towers: cost analysis, CLIP training, evaluation and sweeps")]
pub struct Cli {
    /// More progress output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-module parameter and MAC counts for a tower.
    Analyze(AnalyzeArgs),
    /// Train an image/text pair on the synthetic task.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the synthetic task.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants × budgets × seeds.
    Sweep(SweepArgs),
}

/// Flags shared by the run-producing subcommands.
#[derive(Args, Debug, Clone)]
pub struct RunFlags {
    /// TOML config file.
    #[arg(long, env = "VITAMIN_CONFIG")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, env = "VITAMIN_OUT")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, env = "VITAMIN_SEED")]
    pub seed: Option<u64>,
    /// Config overrides as dotted `key=value` (TOML values), applied after the file.
    /// Repeat the flag or separate with `;` (commas belong to arrays).
    #[arg(long = "set", env = "VITAMIN_SET", value_delimiter = ';')]
    pub set: Vec<String>,
    /// Continue from what is already in the output directory.
    #[arg(long, env = "VITAMIN_RESUME")]
    pub resume: bool,
    /// Replace this tool's artifacts in an existing output directory.
    #[arg(long, env = "VITAMIN_FORCE")]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Registry name: vitamin-s|b|l|xl, vit-s|b|l/<patch>, text-<depth>x<width>.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub variant: Option<String>,
    /// TOML file with a full architecture (`kind = "vitamin" | "vit" | "text"`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Input resolution (context length for text towers).
    #[arg(long)]
    pub input: Option<usize>,
    /// Also write `cost.csv` and a manifest here.
    #[arg(long, env = "VITAMIN_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Locked-text tuning against a pretrained checkpoint's text tower.
    #[arg(long, requires = "text_ckpt")]
    pub ltt: bool,
    #[arg(long)]
    pub text_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, env = "VITAMIN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Training config defining the task (its `data` and `eval` sections).
    #[arg(long, env = "VITAMIN_CONFIG")]
    pub config: PathBuf,
    /// Where `eval_report.json` goes (default: the checkpoint's directory).
    #[arg(long, env = "VITAMIN_OUT")]
    pub out: Option<PathBuf>,
    /// Task seed (default: the config's seed).
    #[arg(long, env = "VITAMIN_SEED")]
    pub seed: Option<u64>,
    #[arg(long = "set", env = "VITAMIN_SET", value_delimiter = ';')]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let res = match &cli.cmd {
        Command::Analyze(a) => commands::analyze(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
