//! `evla`: generate, profile, prune, run, benchmark and verify desk-scale
//! VLA models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 input/file error,
//! 4 verification failure.

mod commands;
mod run_config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Input(String),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Input(_) => 3,
            Failure::Verify(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<evla_core::Error> for Failure {
    fn from(e: evla_core::Error) -> Self {
        match e {
            evla_core::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "evla", version, about = "Build and shrink small VLA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a model with deterministic weights.
    GenModel(GenModelArgs),
    /// Per-layer importance from a calibration pass, as CSV.
    ProfileLayers(ProfileArgs),
    /// Drop layers, sparsify MLPs, and embed the token/cache plan.
    Prune(PruneArgs),
    /// Predict an action chunk for one image and instruction.
    Run(RunArgs),
    /// Compare a baseline and an accelerated model.
    Bench(BenchArgs),
    /// Similarity CSVs and the retained-token mask.
    Analyze(AnalyzeArgs),
    /// Run the oracle suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Scaled,
    Tiny,
}

#[derive(Args)]
struct GenModelArgs {
    /// JSON RunConfig.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, env = "EVLA_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct CalibrationArgs {
    /// Calibration samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    calib_seed: Option<u64>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    calibration: CalibrationArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct PlanArgs {
    /// Drop this many least-important layers.
    #[arg(long, conflicts_with = "drop_layers")]
    n_drop: Option<usize>,
    /// Drop these original layer indices.
    #[arg(long, value_delimiter = ',')]
    drop_layers: Option<Vec<usize>>,
    #[arg(long)]
    mlp_sparsity: Option<f64>,
    /// Visual tokens kept after the capture layer.
    #[arg(long, conflicts_with = "no_token_pruning")]
    token_final: Option<usize>,
    #[arg(long)]
    token_key: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    capture_layer: Option<usize>,
    #[arg(long)]
    cache_interval: Option<usize>,
    #[arg(long)]
    greedy_diversity: bool,
    #[arg(long)]
    no_token_pruning: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    calibration: CalibrationArgs,
}

/// `all` or a visual token count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenBudget {
    All,
    Count(usize),
}

impl FromStr for TokenBudget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TokenBudget::All);
        }
        s.parse()
            .map(TokenBudget::Count)
            .map_err(|_| format!("expected `all` or a token count, got {s:?}"))
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Binary PGM matching the model's image size.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated instruction token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    token_ids: Vec<u32>,
    /// Visual tokens kept after the capture layer; `all` disables pruning.
    #[arg(long)]
    tokens: Option<TokenBudget>,
    #[arg(long)]
    cache_interval: Option<usize>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Actions CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    selection_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    accel: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Synthetic input seed.
    #[arg(long, default_value_t = 0)]
    input_seed: u64,
    /// Also sweep the visual token budget on the base model.
    #[arg(long)]
    sweep: bool,
    #[arg(long, requires = "sweep")]
    sweep_out: Option<PathBuf>,
    /// Report JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    token_ids: Option<Vec<u32>>,
    #[command(flatten)]
    calibration: CalibrationArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer random cases.
    #[arg(long)]
    quick: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Swap in a recompute rule that is off by one, to confirm the suite notices.
    #[arg(long, hide = true)]
    mutate_recompute: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::ProfileLayers(a) => commands::profile_layers(a),
        Command::Prune(a) => commands::prune(a),
        Command::Run(a) => commands::run(a),
        Command::Bench(a) => commands::bench(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evla: {e}");
            ExitCode::from(e.code())
        }
    }
}
