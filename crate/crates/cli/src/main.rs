//! Command-line front end: dataset generation, training, evaluation,
//! and axis sweeps.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use csilab::harness::commands::{
    run_eval, run_gen, run_sweep, run_train, EvalOptions, GenOptions, SweepOptions, TrainOptions,
};
use csilab::harness::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "csilab",
    about = "MU-MIMO CSI feedback laboratory: TypeII codebook, learned feedback, ZF sum rate",
    version
)]
struct Cli {
    /// Path to the experiment config (flat-key TOML). Defaults apply
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel scene dataset.
    Gen {
        /// Number of scenes (default: train_scenes from the config).
        #[arg(long)]
        scenes: Option<usize>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a feedback model on a dataset.
    Train {
        /// Input dataset (the last val_scenes scenes are held out).
        #[arg(long)]
        data: PathBuf,
        /// Loss mode override: mse | ncs | nar | mix | two-stage.
        #[arg(long)]
        loss: Option<String>,
        /// Train the no-position-filling ablation.
        #[arg(long)]
        no_fill: bool,
        /// Output checkpoint path (metrics CSV lands alongside).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one scheme on a dataset, appending a results row.
    Eval {
        /// Input dataset (uses up to eval_scenes scenes).
        #[arg(long)]
        data: PathBuf,
        /// perfect-csi | typeii-codebook | csinet | csinet-nofill.
        #[arg(long)]
        scheme: String,
        /// Checkpoint for the learned schemes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Results CSV (default: <output_dir>/results.csv).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Sweep one axis, retraining learned schemes per point.
    Sweep {
        /// B | Np | NR | sorting | loss.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Run sweep points concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;
    match &cli.command {
        Command::Gen { scenes, seed, out } => {
            let summary = run_gen(
                &cfg,
                &GenOptions {
                    scenes: *scenes,
                    seed: *seed,
                    out: out.clone(),
                },
            )?;
            println!("{summary}");
        }
        Command::Train {
            data,
            loss,
            no_fill,
            out,
        } => {
            let summary = run_train(
                &cfg,
                &TrainOptions {
                    data: data.clone(),
                    loss: loss.clone(),
                    out: out.clone(),
                    ablation_no_fill: *no_fill,
                },
            )?;
            println!("{summary}");
        }
        Command::Eval {
            data,
            scheme,
            checkpoint,
            results,
        } => {
            let row = run_eval(
                &cfg,
                &EvalOptions {
                    data: data.clone(),
                    scheme: scheme.clone(),
                    checkpoint: checkpoint.clone(),
                    results: results.clone(),
                },
            )?;
            println!(
                "{}: mean rate {:.4} (stderr {:.4}) over {} scenes, {} feedback bits",
                row.scheme, row.mean_rate, row.stderr, row.scenes, row.b_bits
            );
        }
        Command::Sweep {
            axis,
            values,
            parallel,
        } => {
            let (_, table) = run_sweep(
                &cfg,
                &SweepOptions {
                    axis: axis.clone(),
                    values: values.clone(),
                    parallel: *parallel,
                },
            )?;
            println!("{table}");
        }
    }
    Ok(())
}
