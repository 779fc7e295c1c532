//! `tower`: pre-training, fine-tuning, sweeps, transform previews,
//! embedding export and SVG reports.
//!
//! Exit codes: 0 success, 1 validation error (bad flag, config key or
//! value), 2 runtime failure (a diagnostics file is written to the run
//! directory).

mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tower_core::TowerError;

#[derive(Parser)]
#[command(
    name = "tower",
    version,
    about = "Self-supervised pre-training with Bezier intensity translation and shaped masking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a dataset.
///
/// Precedence, lowest first: built-in defaults, `--config` file, `--set`
/// pairs in order, dedicated flags.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file; keys mirror the config field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; nothing is written outside it.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one arm; writes best.ckpt and metrics.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Arm: random, tower_nl, tower_m, tower_nl+m, contrastive, classic, tower.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint and report test AUC or Dice.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// classify or segment.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Train only the classification head.
        #[arg(long)]
        linear_probe: bool,
    },
    /// Label-fraction sweep over pre-training arms.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arms; each is pre-trained unless given by --ckpt.
        #[arg(long, default_value = "tower,random")]
        arms: String,
        /// Comma-separated label fractions in (0, 1].
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        linear_probe: bool,
        /// Use an existing checkpoint for an arm, `ARM=PATH`. Repeatable.
        #[arg(long = "ckpt", value_name = "ARM=PATH")]
        ckpts: Vec<String>,
    },
    /// Write original, translated, masked and mask PNGs with plan sidecars.
    TransformPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Write per-sample encoder representations to embeddings.csv.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render metrics and sweep CSVs (files or directories) to SVG charts.
    Report {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Failure classified by exit code.
pub enum CliError {
    Validation(String),
    Runtime(TowerError),
}

impl From<TowerError> for CliError {
    fn from(e: TowerError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_diagnostics(out: &Path, err: &TowerError) -> Option<PathBuf> {
    std::fs::create_dir_all(out).ok()?;
    let path = out.join("error.log");
    let mut text = format!("{err}\n\n{err:?}\n");
    if let TowerError::Diverged { dump, .. } = err {
        text.push_str(&format!("plans of the failing batch: {}\n", dump.display()));
    }
    std::fs::write(&path, text).ok()?;
    Some(path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let out = match &cli.command {
        Command::Pretrain { common, .. }
        | Command::Finetune { common, .. }
        | Command::Sweep { common, .. }
        | Command::TransformPreview { common, .. }
        | Command::ExportEmbeddings { common, .. } => common.out.clone(),
        Command::Report { out, .. } => out.clone(),
    };
    let result = match cli.command {
        Command::Pretrain {
            common,
            mode,
            epochs,
        } => commands::pretrain(&common, mode, epochs),
        Command::Finetune {
            common,
            ckpt,
            task,
            label_fraction,
            trials,
            linear_probe,
        } => commands::finetune(&common, &ckpt, task, label_fraction, trials, linear_probe),
        Command::Sweep {
            common,
            arms,
            fractions,
            trials,
            task,
            linear_probe,
            ckpts,
        } => commands::sweep(
            &common,
            &arms,
            fractions,
            trials,
            task,
            linear_probe,
            &ckpts,
        ),
        Command::TransformPreview { common, mode, n } => {
            commands::transform_preview(&common, mode, n)
        }
        Command::ExportEmbeddings { common, ckpt } => commands::export_embeddings(&common, &ckpt),
        Command::Report { out, inputs } => commands::report(&out, &inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            if let Some(p) = write_diagnostics(&out, &e) {
                eprintln!("diagnostics: {}", p.display());
            }
            ExitCode::from(2)
        }
    }
}
