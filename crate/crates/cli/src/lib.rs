//! Batch driver for the purification laboratory. See [`config`] for the
//! experiment file format and [`Cli`] for the command line.

pub mod commands;
pub mod config;
pub mod error;
pub mod grid;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{GridRequest, Run, Stage};
use crate::config::ExperimentConfig;
pub use crate::error::CliError;

/// Environment variable holding the default output root.
pub const OUT_DIR_ENV: &str = "ATOP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "atop",
    version,
    about = "Train, attack and evaluate random-transform purification defenses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `seeds.master`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Root under which run directories are created.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,

    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,

    /// Per-key override, e.g. `--set atop.lambda=0.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier on the training split.
    TrainClassifier,
    /// Pretrain the purifier (and critic) on transformed training images.
    PretrainPurifier,
    /// Adversarially fine-tune the pretrained purifier with the classifier frozen.
    FinetuneAtop,
    /// Generate and store adversarial examples for every configured attack.
    Attack {
        /// Attack the fine-tuned purifier instead of the pretrained one.
        #[arg(long)]
        atop: bool,
    },
    /// Standard and robust accuracy for every transform, purifier and attack.
    Evaluate,
    /// Accuracy over the values of one transform parameter.
    Sweep {
        /// Use the fine-tuned purifier.
        #[arg(long)]
        atop: bool,
    },
    /// Draw selected examples through the pipeline stages as a PNG grid.
    RenderGrid {
        /// Indices into the evaluation subset.
        #[arg(long, value_delimiter = ',', required = true)]
        examples: Vec<usize>,
        /// Columns: clean, adversarial, transformed, purified.
        #[arg(long, value_delimiter = ',', default_value = "clean,transformed,purified")]
        stages: Vec<Stage>,
        /// Attack id for the adversarial column; defaults to the first attack.
        #[arg(long)]
        attack: Option<String>,
        /// Use the fine-tuned purifier.
        #[arg(long)]
        atop: bool,
        /// Output file; defaults to `grid.png` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainClassifier => "train-classifier",
            Command::PretrainPurifier => "pretrain-purifier",
            Command::FinetuneAtop => "finetune-atop",
            Command::Attack { .. } => "attack",
            Command::Evaluate => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::RenderGrid { .. } => "render-grid",
        }
    }
}

/// What a successful invocation produced.
pub struct Outcome {
    pub run_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

/// Loads the config, creates the run directory and runs the subcommand.
/// On failure the run directory (if it exists) receives `error.json`.
pub fn run(cli: &Cli) -> Result<Outcome, (CliError, Option<PathBuf>)> {
    let cfg = resolve_config(cli).map_err(|e| (e, None))?;
    let name = cli.command.name();
    let run = Run::create(cfg, &cli.out_dir, name).map_err(|e| (e, None))?;
    dispatch(&run, &cli.command)
        .map(|artifacts| Outcome {
            run_dir: run.dir.clone(),
            artifacts,
        })
        .map_err(|e| {
            let record = e.record(name);
            let _ = std::fs::write(run.dir.join("error.json"), record.to_string());
            (e, Some(run.dir.clone()))
        })
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    if cli.device != "cpu" {
        return Err(CliError::Schema(format!(
            "device {:?} is not available; only cpu is supported",
            cli.device
        )));
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Schema("--config is required".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seeds.master={seed}"));
    }
    ExperimentConfig::load(path, &overrides)
}

fn dispatch(run: &Run, command: &Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::TrainClassifier => commands::train_classifier_cmd(run),
        Command::PretrainPurifier => commands::pretrain_purifier_cmd(run),
        Command::FinetuneAtop => commands::finetune_atop_cmd(run),
        Command::Attack { atop } => commands::attack_cmd(run, *atop),
        Command::Evaluate => commands::evaluate_cmd(run).map(|(paths, _)| paths),
        Command::Sweep { atop } => commands::sweep_cmd(run, *atop),
        Command::RenderGrid {
            examples,
            stages,
            attack,
            atop,
            out,
        } => commands::render_grid_cmd(
            run,
            &GridRequest {
                examples: examples.clone(),
                stages: stages.clone(),
                attack: attack.clone(),
                atop: *atop,
                out: out.clone(),
            },
        ),
    }
}
