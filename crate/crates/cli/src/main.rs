//! `lexdiff`: dataset generation, training, sampling, evaluation, bound
//! reports and plot-data export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use lexdiff_core::harness::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "lexdiff",
    version,
    about = "Text-conditioned series diffusion with constrained finetuning"
)]
pub struct Cli {
    /// Flat `key = value` file of flag defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset directory.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = lexdiff_core::synthdata::DEFAULT_LEN)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        label_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: unconditional training on every train series.
    Pretrain {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Batches averaged for the constraint anchor.
        #[arg(long)]
        xi_batches: Option<usize>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: finetune on the labeled train records.
    Finetune {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Constraint anchor; defaults to the value stored in `--init`.
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Step size of text2data and unconstrained updates.
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        p_uncond: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Step size of from-scratch supervised training.
        #[arg(long)]
        supervised_lr: Option<f64>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-step trace CSV; defaults to `<out>` with extension
        /// `traces.csv` in text2data mode.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Draw series for a text prompt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Guidance weight; 0 is pure conditional sampling.
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON-lines output, one series per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-feature MAE of a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_per_prompt: Option<usize>,
        #[arg(long)]
        null_samples: Option<usize>,
        /// Evaluate only the first test prompts.
        #[arg(long)]
        max_prompts: Option<usize>,
        #[arg(long)]
        keep_pairs: Option<usize>,
        /// Evaluation JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generalization-bound report as JSON.
    Bounds {
        /// Variance proxy; estimated from `--ckpt` and `--data` when absent.
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Unlabeled count; defaults to the train split size of `--data`.
        #[arg(long)]
        n: Option<usize>,
        /// Labeled count; defaults to the labeled train records of `--data`.
        #[arg(long)]
        np: Option<usize>,
        #[arg(long)]
        theta_card: f64,
        /// Constraint level; defaults to the anchor stored in `--ckpt`, else 0.
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Draws for the plug-in variance estimate.
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect evaluation JSON files and trace CSVs into plot data.
    Export {
        /// Directory of `*.json` evaluations and `*.traces.csv` traces.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let args = match config::splice(std::env::args_os().collect(), &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    };
    // clap exits with code 2 on usage errors
    let matches = cmd.get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
