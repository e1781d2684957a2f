use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sst_atl::active::Strategy;

#[derive(Debug, Parser)]
#[command(name = "sst-atl", version, about = "Hyperspectral classification with a spatial-spectral transformer, active learning and cross-domain transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled cube.
    Synth(SynthArgs),
    /// Train on the training split and evaluate on the test split.
    Train(TrainArgs),
    /// Run the active-learning loop.
    Al(AlArgs),
    /// Adapt a trained model to a new scene.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare query strategies and component toggles.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for splits, initialization, dropout and random queries.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cube file (HSIC).
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Label file (HSIL).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Split manifest (JSON). Generated from the configured ratios when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint (SSTK) read by `eval`; written by `train`, `al` and `transfer` (default: inside `--out`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct QueryFlags {
    /// hybrid, random, entropy, margin or diversity_only.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Samples moved from the pool to the training set per round.
    #[arg(long)]
    pub query_size: Option<usize>,
    /// Number of query rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Uncertainty prefilter keeps beta × query-size candidates for the diversity stage.
    #[arg(long)]
    pub beta: Option<usize>,
    /// Odd side length of the spatial neighborhood used for diversity.
    #[arg(long)]
    pub neighborhood: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Number of classes (at least 2).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..=65535))]
    pub classes: u64,
    /// Extent as ROWSxCOLSxBANDS.
    #[arg(long, default_value = "32x32x16", value_parser = parse_size)]
    pub size: (usize, usize, usize),
    /// Standard deviation of the per-band Gaussian noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Phase offset of every class prototype, in radians.
    #[arg(long, default_value_t = 0.0)]
    pub shift: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct AlArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub query: QueryFlags,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Checkpoint trained on the source scene (`--cube`/`--labels`).
    #[arg(long)]
    pub source_ckpt: PathBuf,
    /// Target scene cube (HSIC).
    #[arg(long)]
    pub target_cube: PathBuf,
    /// Target labels; defaults to `<cube stem>.hsil`, then `labels.hsil`, beside the target cube.
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
    /// Fraction of encoder layers to freeze.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Share of each target class used for fine-tuning.
    #[arg(long)]
    pub target_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub query: QueryFlags,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Target scene for the freezing toggle; skipped when absent.
    #[arg(long)]
    pub target_cube: Option<PathBuf>,
    /// Target labels; defaults to `<cube stem>.hsil`, then `labels.hsil`, beside the target cube.
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: sst_atl::active::ActiveError| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match nums {
        Ok(v) if v.len() == 3 && v.iter().all(|&n| n > 0) => Ok((v[0], v[1], v[2])),
        _ => Err(format!("expected ROWSxCOLSxBANDS with positive values, got {s:?}")),
    }
}
