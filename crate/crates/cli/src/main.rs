//! `cigt`: train, analyse and compare conditional information-gain trellis runs.

mod commands;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cigt::analysis::DOMINANT_CUTOFF;
use cigt::data::Split;
use cigt::presets::PRESET_NAMES;
use cigt::train::TrainMode;
use mimalloc::MiMalloc;

use commands::{AnalyzeRequest, TrainRequest, EXPERIMENT_FILE};
use experiment::Experiment;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "cigt", version, about = "Conditional information-gain trellis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct Source {
    /// Experiment file (TOML with `name`, `dataset`, `[model]` and `[train]`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in experiment; see `cigt presets`.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn resolve(&self) -> cigt::Result<Experiment> {
        match (&self.config, &self.preset) {
            (Some(path), _) => Experiment::load(path),
            (None, Some(name)) => Experiment::from_preset(name),
            (None, None) => Err(cigt::Error::Config("pass --config FILE or --preset NAME".into())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a report into the output directory.
    Train {
        #[command(flatten)]
        source: Source,
        /// Directory holding the four IDX files.
        #[arg(long, env = "CIGT_DATA_DIR", default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Defaults to `runs/<name>-seed<seed>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Routing used during training: `ig` or `random`.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Sequential execution with a fixed reduction order (the engine never runs otherwise).
        #[arg(long)]
        deterministic: bool,
        /// Continue the run stored in the output directory from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Suppress the per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint: routing histograms, cost report and dominant classes per unit.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long, env = "CIGT_DATA_DIR", default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Cumulative class share that defines a unit's dominant classes.
        #[arg(long, default_value_t = DOMINANT_CUTOFF)]
        cutoff: f64,
    },
    /// Side-by-side accuracy, parameters and MACs of two `report.json` files.
    Compare { a: PathBuf, b: PathBuf },
    /// Parameter and MAC breakdown of a model.
    Cost {
        #[command(flatten)]
        source: Source,
    },
    /// List the built-in experiments, or print one as an experiment file.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

fn run(cli: Cli) -> cigt::Result<()> {
    match cli.command {
        Command::Train { source, data_dir, out_dir, seed, epochs, mode, deterministic, resume, quiet } => {
            let mut experiment = match (&out_dir, resume) {
                (Some(dir), true) => Experiment::load(&dir.join(EXPERIMENT_FILE))?,
                (None, true) => return Err(cigt::Error::Config("--resume needs --out-dir".into())),
                _ => source.resolve()?,
            };
            if !resume {
                if let Some(seed) = seed {
                    experiment.train.seed = seed;
                }
                if let Some(epochs) = epochs {
                    experiment.train.epochs = epochs;
                }
                if let Some(mode) = mode {
                    experiment.train.mode = mode;
                }
                experiment.deterministic |= deterministic;
                experiment.validate()?;
            }
            let out_dir = out_dir
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", experiment.name, experiment.train.seed)));
            let report = commands::train(&TrainRequest { experiment, data_dir, out_dir: out_dir.clone(), resume, quiet })?;
            print!("{}", report.render());
            println!("artifacts in {}", out_dir.display());
        }
        Command::Analyze { checkpoint, data_dir, split, out_dir, cutoff } => {
            let out_dir = out_dir.unwrap_or_else(|| {
                checkpoint.parent().map_or_else(|| PathBuf::from("."), PathBuf::from)
            });
            let text = commands::analyze(&AnalyzeRequest { checkpoint, data_dir, split, out_dir, cutoff })?;
            println!("{text}");
        }
        Command::Compare { a, b } => print!("{}", commands::compare_reports(&a, &b)?),
        Command::Cost { source } => {
            let experiment = source.resolve()?;
            println!("{}", commands::cost_report(&experiment.model)?);
        }
        Command::Presets { show } => match show {
            Some(name) => print!("{}", Experiment::from_preset(&name)?.to_toml()?),
            None => {
                for name in PRESET_NAMES {
                    println!("{name}");
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
