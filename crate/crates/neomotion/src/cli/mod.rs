//! Command-line orchestration of the five-condition experiment matrix on
//! phantom cohorts.
//!
//! Every subcommand reads one flat key=value config file and operates on a
//! fixed artifact tree under the output directory, so each stage can be
//! re-run in isolation against the persisted outputs of earlier stages:
//!
//! ```text
//! out/
//!   cohort/           phantoms + labels + manifest.txt
//!   corrupted/        motion-corrupted copies (train-motion and test splits)
//!   models/           cyclegan + segmenter checkpoints and loss histories
//!   corrected/        MC-corrected test volumes
//!   synthesized/      MG-synthesized motion copies of clean train + test volumes
//!   roundtrip/        MC applied back over the synthesized test volumes
//!   segmentations/    predicted label maps per experiment condition
//!   reports/          per-condition metric CSVs, summary.csv, PSNR table
//! ```
//!
//! Exit codes: 0 success, 2 configuration error (parse, unknown key, bad
//! value, usage), 3 missing input file, 4 shape or data error, 5 internal
//! error. A nonexistent config path counts as a missing input.
//!
//! `NEOMOTION_THREADS` caps the worker-thread count of all parallel stages.

pub mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args as ClapArgs, Parser, Subcommand};

pub use config::{ExperimentConfig, RawConfig};
pub use stages::{Condition, Tree, CONDITIONS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("data: {0}")]
    Data(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Data(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "neomotion",
    about = "Motion-artifact simulation, correction, and tissue-segmentation experiments on phantom MRI volumes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(ClapArgs, Debug)]
struct StageArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory root (overrides `out=` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed=` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the phantom cohort and its manifest.
    Phantom(StageArgs),
    /// Corrupt the train-motion and test splits with simulated motion.
    Corrupt(StageArgs),
    /// Train the correction/generation cycle and save the four checkpoints.
    TrainCyclegan(StageArgs),
    /// Train the tissue segmenter (augmentation mode per config).
    TrainSegnet(StageArgs),
    /// Apply the trained correction generator to the corrupted and
    /// synthesized test volumes.
    Correct(StageArgs),
    /// Apply the trained motion generator to the clean train and test
    /// volumes.
    AddMotion(StageArgs),
    /// Segment all five experiment conditions on the test split.
    Segment(StageArgs),
    /// Score segmentations against reference labels and emit reports.
    Evaluate(StageArgs),
    /// Run the full pipeline end to end.
    Experiment(StageArgs),
}

fn setup_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("NEOMOTION_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NEOMOTION_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, CliError> {
    if !args.config.exists() {
        return Err(CliError::MissingInput(args.config.clone()));
    }
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Internal(format!("{}: {e}", args.config.display())))?;
    let raw = RawConfig::parse(&text)?;
    ExperimentConfig::from_raw(&raw, args.out.clone(), args.seed)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    setup_threads()?;
    let (args, run): (&StageArgs, fn(&ExperimentConfig) -> Result<(), CliError>) = match &cli.cmd {
        Cmd::Phantom(a) => (a, stages::stage_phantom),
        Cmd::Corrupt(a) => (a, stages::stage_corrupt),
        Cmd::TrainCyclegan(a) => (a, stages::stage_train_cyclegan),
        Cmd::TrainSegnet(a) => (a, stages::stage_train_segnet_configured),
        Cmd::Correct(a) => (a, stages::stage_correct),
        Cmd::AddMotion(a) => (a, stages::stage_add_motion),
        Cmd::Segment(a) => (a, stages::stage_segment),
        Cmd::Evaluate(a) => (a, stages::stage_evaluate),
        Cmd::Experiment(a) => (a, stages::stage_experiment),
    };
    let cfg = load_config(args)?;
    run(&cfg)
}

/// Binary entry point; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help/--version land here with a zero-exit display kind.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
