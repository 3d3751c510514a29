//! Commands behind the `acn` binary.
//!
//! Every command writes into one output directory and leaves a
//! `run_manifest.toml` there. Without `--out`, directories are created
//! below `$ACN_OUTPUT_ROOT` (default `./acn-output`).

pub mod error;
pub mod manifest;

mod entropy;
mod eval;
mod subsets;
mod synth;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use acn_core::data::ModalityMask;
use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};
pub use eval::{resolve_checkpoint, EVAL_CASES_CSV, EVAL_CSV};
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const OUTPUT_ROOT_ENV: &str = "ACN_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "acn", version, about = "Co-training segmenters for missing MRI modalities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train the co-training model for one modality subset.
    Train(TrainArgs),
    /// Score checkpoints on a dataset.
    Eval(EvalArgs),
    /// Write entropy maps and segmentations of both paths for one case.
    EntropyExport(EntropyArgs),
    /// Print the 15 modality subsets with their ids.
    ListSubsets(ListArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    /// Spatial shape, e.g. `64x64` or `48x48x48`.
    #[arg(long, default_value = "64x64")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Subset id (1-15) or tokens such as `fl,t2`.
    #[arg(long)]
    pub mask: ModalityMask,
    /// TOML file with training settings; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Modules to switch off: any of `ena,kna,mmi`.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patch shape, e.g. `64x64`; its length sets the spatial rank.
    #[arg(long)]
    pub patch: Option<String>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Prepare batches on a background thread.
    #[arg(long)]
    pub prefetch: bool,
    #[arg(long)]
    pub force: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint, a training output directory, or with `--all-subsets`
    /// a directory holding one training output per subset.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub all_subsets: bool,
    /// Require the checkpoint to have been trained for this mask.
    #[arg(long)]
    pub mask: Option<ModalityMask>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Case directory with BraTS-style file names.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Some requested results were unavailable.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Complete => 0,
            Outcome::Partial => 5,
        }
    }
}

pub fn run(cli: Cli, args: &[String]) -> Result<Outcome> {
    match cli.command {
        Command::Synth(a) => synth::run(&a, args),
        Command::Train(a) => train::run(&a, args),
        Command::Eval(a) => eval::run(&a, args),
        Command::EntropyExport(a) => entropy::run(&a, args),
        Command::ListSubsets(a) => subsets::run(&a, args),
    }
}

/// `$ACN_OUTPUT_ROOT`, or `acn-output` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("acn-output"))
}

fn out_dir(explicit: &Option<PathBuf>, default: impl AsRef<Path>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(default))
}

/// Refuses to reuse a non-empty directory unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(CliError::Config(format!(
            "output directory {} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Parses `64x64`, `64,64` or `48x48x48`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("invalid shape `{s}`; expected e.g. 64x64 or 48x48x48")))?;
    if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
        return Err(CliError::Config(format!(
            "shape `{s}` must have 2 or 3 positive extents"
        )));
    }
    Ok(dims)
}

fn fmt_shape(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}
