//! The `debclust` command-line tool.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Outcome;
use config::{ExperimentConfig, OUTPUT_DIR_ENV};
use debclust::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "debclust",
    version,
    about = "Contrastive representation learning with deep clustering",
    after_help = "Exit status: 0 success, 1 usage or config error, 2 verification failure, 3 I/O error.\n\
                  The DEBCLUST_OUTPUT_DIR environment variable overrides output_dir."
)]
pub struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, short, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. --set train.gamma=1. Applied in order
    /// after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and test splits as dataset containers.
    GenData,
    /// Train encoder, head and centroids; write checkpoint and loss CSV.
    Pretrain,
    /// Linear probe on frozen embeddings with all training labels.
    LinearEval {
        /// Checkpoint to evaluate (default: <output_dir>/pretrain/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe trained on a stratified 10% of the training labels.
    SemiEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// K-nearest-neighbour probe on frozen embeddings.
    KnnEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck,
    /// Loss and its derivatives over a grid of smoothing exponents.
    LambdaSweep,
    /// Train over the exponent x clustering-weight grid and compare
    /// exponents across seeds.
    Ablate,
    /// Print the resolved config.
    ShowConfig,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let cfg = match ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides, env_dir) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::LinearEval { checkpoint } => commands::linear_eval(&cfg, checkpoint.as_deref(), false),
        Command::SemiEval { checkpoint } => commands::linear_eval(&cfg, checkpoint.as_deref(), true),
        Command::KnnEval { checkpoint } => commands::knn_eval(&cfg, checkpoint.as_deref()),
        Command::GradCheck => commands::grad_check(&cfg),
        Command::LambdaSweep => commands::lambda_sweep(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(Outcome::Ok)
        }
    };
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => EXIT_VERIFY,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
