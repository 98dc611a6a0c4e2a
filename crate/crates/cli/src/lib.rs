//! Command-line driver: `train`, `eval`, `infer`, `ablate` and `synth`.
//!
//! Exit statuses are 0 on success, 1 on a runtime failure and 2 on a usage
//! or configuration error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use samcd::data::Split;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_infer, cmd_synth, cmd_train, load_split, train_on, AblationAxis, AblationRow,
    AblationTable, InferInput, TrainSummary, BEST_CHECKPOINT, CONFIG_FILE, FINAL_CHECKPOINT, LOG_FILE,
};
pub use config::{RunArgs, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(samcd::Error),
}

impl From<samcd::Error> for CliError {
    fn from(e: samcd::Error) -> Self {
        match e {
            samcd::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "samcd", version, about = "Bi-temporal change detection", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run config; flags and SAMCD_* variables override it.
    #[arg(long, env = "SAMCD_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.run)
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: samcd::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, a JSON-lines log and the effective config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Average over the eight dihedral transforms.
        #[arg(long)]
        tta: bool,
        /// Write 255/0 change maps next to the report.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Predict the change map of one image pair.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "t1_features")]
        t1: Option<PathBuf>,
        #[arg(long, required_unless_present = "t2_features")]
        t2: Option<PathBuf>,
        /// FPYR1 feature pyramid of the first date (external encoder).
        #[arg(long, conflicts_with = "t1", requires = "t2_features")]
        t1_features: Option<PathBuf>,
        #[arg(long, conflicts_with = "t2", requires = "t1_features")]
        t2_features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tta: bool,
    },
    /// Train once per setting of one axis and tabulate the scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        axis: AblationAxis,
    },
    /// Write generated pairs in the dataset layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Dataset root; defaults to `dataset_root`, then `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let s = cmd_train(&cfg, resume.as_deref())?;
            println!("trained on {} pairs; final checkpoint {}", s.train_size, s.final_checkpoint.display());
            if let Some(best) = s.best_checkpoint {
                println!("best checkpoint {}", best.display());
            }
        }
        Command::Eval { common, checkpoint, split, tta, save_predictions } => {
            let cfg = common.resolve()?;
            let report = cmd_eval(&cfg, &checkpoint, split, tta, save_predictions)?;
            let a = &report.aggregate;
            println!(
                "{split}: Pre {:.4} Rec {:.4} F1 {:.4} IoU {:.4} OA {:.4} mF1 {:.4} mIoU {:.4}",
                a.precision, a.recall, a.f1, a.iou, a.oa, a.mf1, a.miou
            );
        }
        Command::Infer { common, checkpoint, t1, t2, t1_features, t2_features, out, tta } => {
            let cfg = common.resolve()?;
            let input = match (t1, t2, t1_features, t2_features) {
                (Some(t1), Some(t2), None, None) => InferInput::Images { t1, t2 },
                (None, None, Some(t1), Some(t2)) => InferInput::Pyramids { t1, t2 },
                _ => return Err(CliError::Usage("give either --t1/--t2 or --t1-features/--t2-features".into())),
            };
            let binary = cmd_infer(&cfg, &checkpoint, &input, &out, tta)?;
            let changed = binary.iter().filter(|&&v| v != 0).count();
            println!("{}: {changed} of {} pixels changed", out.display(), binary.len());
        }
        Command::Ablate { common, axis } => {
            let cfg = common.resolve()?;
            print!("{}", cmd_ablate(&cfg, axis)?.to_markdown());
        }
        Command::Synth { common, split, out } => {
            let cfg = common.resolve()?;
            let root = out.or_else(|| cfg.dataset_root.clone()).unwrap_or_else(|| cfg.output_dir.clone());
            let n = cmd_synth(&cfg, split, &root)?;
            println!("wrote {n} {split} pairs under {}", root.display());
        }
    }
    Ok(())
}

/// Parse `args` (program name first) and run; returns the exit status.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    ExitCode::from(run_status(args))
}

pub fn run_status<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
