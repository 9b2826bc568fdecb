//! Experiment driver: dataset generation, training, fitting, evaluation and
//! export of plot-ready artifacts. Deterministic given a config and seed.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "rtify", version, about = "Stopping-time experiment driver")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.master_seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a fully documented default config to stdout.
    PrintConfig,
    /// Generate train/eval/warmup stimulus datasets into <out>/dataset.
    GenStimuli,
    /// Generate synthetic reference RTs (DDM) into <out>/reference.csv.
    GenReference,
    /// Train the recurrent backbone on <out>/dataset.
    TrainBackbone {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit the stopping module to reference RT distributions.
    FitRt {
        /// "full" or "correct-only".
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the stopping module with the speed–accuracy self-penalty.
    TrainSelfpenalty {
        /// Penalty strength; defaults to objectives.lambda.
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit the attractor-circuit head to reference RT distributions.
    FitWw {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also dump one fitted S-trajectory as CSV.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Evaluate a fitted checkpoint on the eval split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also grid-fit and score the entropy-thresholding baseline.
        #[arg(long)]
        compare_entropy: bool,
    },
    /// Bundle plot-ready CSV/JSON artifacts from a run directory.
    Export {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

/// Error category mapped onto the documented exit codes.
#[derive(Debug)]
pub enum AppError {
    /// Exit 2: configuration problems.
    Config(String),
    /// Exit 3: numeric divergence during training.
    Numeric(String),
    /// Exit 4: i/o and file-format problems.
    Io(String),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Numeric(_) => 3,
            AppError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Numeric(m) | AppError::Io(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let env = env_logger::Env::new().filter_or("RTIFY_LOG", if cli.quiet { "error" } else { "info" });
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();

    if let Some(n) = cli.workers {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let ctx = commands::Context {
        config_path: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };

    let result = match cli.cmd {
        Command::PrintConfig => commands::print_config(),
        Command::GenStimuli => commands::gen_stimuli(&ctx),
        Command::GenReference => commands::gen_reference(&ctx),
        Command::TrainBackbone { dataset } => commands::train_backbone(&ctx, dataset),
        Command::FitRt {
            mode,
            backbone,
            reference,
            dataset,
        } => commands::fit_rt(&ctx, &mode, backbone, reference, dataset),
        Command::TrainSelfpenalty {
            lambda,
            backbone,
            dataset,
        } => commands::train_selfpenalty(&ctx, lambda, backbone, dataset),
        Command::FitWw {
            backbone,
            reference,
            dataset,
            dump_trajectories,
        } => commands::fit_ww(&ctx, backbone, reference, dataset, dump_trajectories),
        Command::Eval {
            ckpt,
            backbone,
            reference,
            dataset,
            compare_entropy,
        } => commands::eval(&ctx, ckpt, backbone, reference, dataset, compare_entropy),
        Command::Export { run } => commands::export(&ctx, run),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
