//! `dfn`: preprocessing, staged training, generation and diagnostics for
//! the motion model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dfn::DfnError;

/// Exit status for each failure class.
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dfn", version, about = "Stochastic motion synthesis from mocap")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a directory of BVH clips into training features.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clips recorded faster than this are decimated to it.
        #[arg(long, default_value_t = dfn::training::TRAINING_FPS)]
        fps: f64,
    },
    /// Train one stage (or all three in order) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `stage`.
        #[arg(long, value_parser = ["1", "2", "3", "all"])]
        stage: Option<String>,
    },
    /// Sample a continuation of a prefix motion.
    Generate {
        /// Directory holding the three stage checkpoints.
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        /// Prefix as a feature file (.dfnf) or BVH clip; the last 64 frames are used.
        #[arg(long)]
        prefix: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        frames: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output BVH path.
        #[arg(long)]
        out: PathBuf,
        /// Latent trace CSV; defaults to the output path with `.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Frames between redraws of the future state.
        #[arg(long, default_value_t = 1)]
        resample_period: usize,
    },
    /// Write diagnostic tables and plots.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Preprocessed data directory.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        /// Prefix file; defaults to the opening frames of the first training sequence.
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// Frames taken from the training data when no prefix file is given.
        #[arg(long, default_value_t = 20)]
        prefix_frames: usize,
        #[arg(long, default_value_t = dfn::evaluation::DEFAULT_SEQUENCES)]
        sequences: usize,
        #[arg(long, default_value_t = dfn::evaluation::DEFAULT_LENGTH)]
        length: usize,
        /// Generated frames at which latent states are recorded.
        #[arg(long, value_delimiter = ',', default_values_t = dfn::evaluation::DEFAULT_CHECKPOINTS)]
        t_list: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        resample_period: usize,
        /// Space projected in pca mode.
        #[arg(long, value_enum, default_value_t = Space::Latent)]
        space: Space,
        /// Include root velocities in pose distances.
        #[arg(long)]
        with_velocity: bool,
    },
    /// Summarize a BVH, feature or weight file, or a data/checkpoint directory.
    Inspect { path: PathBuf },
    /// Write a synthetic walking clip (useful for trying the pipeline).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        seconds: f64,
        #[arg(long, default_value_t = 120.0)]
        fps: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pca,
    Divergence,
    Meandist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Space {
    /// Per-frame latent codes from the pose encoder.
    Latent,
    /// Normalized pose features.
    Feature,
}

/// Bad command-line values caught after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<DfnError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERIC,
        Some(DfnError::InvalidInput(_) | DfnError::Shape { .. }) => EXIT_USAGE,
        Some(_) => EXIT_IO,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_IO,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DFN_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
