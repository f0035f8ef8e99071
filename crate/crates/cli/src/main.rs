//! `zest`: command line front end for signature-based surrogate selection.
//!
//! Exit codes: 0 on success, 1 when an operation fails, 2 for usage errors (bad flags or
//! missing input files).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zest_core::zest::DistanceMetric;

#[derive(Parser, Debug)]
#[command(name = "zest", version, about = "Query-only model distances and transfer attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train a dense classifier on a CSV dataset.
    Train(TrainArgs),
    /// Sample reference points and masks into a perturbation plan.
    Plan(PlanArgs),
    /// Compute an oracle's signature under a plan and add it to a signature store.
    Sign(SignArgs),
    /// Distance between two signature files.
    Dist(DistArgs),
    /// Pick the stored proxy closest to a victim signature.
    Select(SelectArgs),
    /// Craft PGD adversarial examples on a surrogate model.
    Attack(AttackArgs),
    /// Score an adversarial batch against a victim oracle.
    Transfer(TransferArgs),
    /// Run an end-to-end campaign from a TOML config.
    Campaign(CampaignArgs),
    /// Serve a model file over HTTP.
    Serve(ServeArgs),
    /// Replay surrogate selection over the published distance tables.
    Replay(ReplayArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DataKind {
    Glyphs,
    Blobs,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "glyphs")]
    kind: DataKind,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Image side length (glyphs).
    #[arg(long, default_value_t = 8)]
    side: usize,
    /// Strokes per class prototype (glyphs).
    #[arg(long, default_value_t = 3)]
    strokes: usize,
    /// Pixel noise (glyphs).
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Feature count (blobs).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Cluster standard deviation (blobs).
    #[arg(long, default_value_t = 0.08)]
    spread: f64,
    /// Hold out this share as `test.csv` next to `train.csv`.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model id; also the output file stem.
    #[arg(long)]
    id: String,
    /// Comma-separated hidden widths; empty for a linear model.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ReplacementArg {
    SegmentMean,
    Zeros,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Dataset to draw reference points from.
    #[arg(long)]
    data: PathBuf,
    /// Reference points.
    #[arg(long, default_value_t = 128)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    perturbations: usize,
    /// Contiguous segments over the feature vector.
    #[arg(long, conflicts_with = "patches")]
    segments: Option<usize>,
    /// Image patches as HEIGHT,WIDTH,PATCH_H,PATCH_W.
    #[arg(long, value_delimiter = ',')]
    patches: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    ridge: f64,
    /// Kernel width (default 0.25·sqrt(segments)).
    #[arg(long)]
    kernel_width: Option<f64>,
    #[arg(long, value_enum, default_value = "segment-mean")]
    replacement: ReplacementArg,
    /// Only sample points every listed model classifies correctly.
    #[arg(long = "verify-with")]
    verify_with: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file name inside --out.
    #[arg(long, default_value = "plan.plan")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SignArgs {
    /// Model file or http(s) URL of a prediction server.
    #[arg(long)]
    oracle: String,
    #[arg(long)]
    plan: PathBuf,
    /// Id stored with the signature (default: the oracle's id).
    #[arg(long)]
    id: Option<String>,
    /// Rows per HTTP request for remote oracles.
    #[arg(long, default_value_t = 1000)]
    max_batch_rows: usize,
    /// Signature store directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_parser = parse_metric, default_value = "cosine")]
    metric: DistanceMetric,
    #[arg(long)]
    include_intercepts: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    victim_sig: PathBuf,
    #[arg(long, value_parser = parse_metric, default_value = "cosine")]
    metric: DistanceMetric,
    /// Also write the full report as CSV into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Surrogate model file.
    #[arg(long)]
    model: PathBuf,
    /// Clean points to attack.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.02)]
    step_size: f64,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Round results to multiples of 1/255.
    #[arg(long)]
    quantize: bool,
    /// Attack only the first this many points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Victim model file or URL.
    #[arg(long)]
    victim: String,
    /// Adversarial batch written by `attack`.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_batch_rows: usize,
    /// Also write the outcome as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long, value_parser = parse_metric, default_value = "linf")]
    metric: DistanceMetric,
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Directory with the fixture CSVs (default: the bundled copies).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Also print rank agreement between reference-set sizes.
    #[arg(long)]
    stability: bool,
    /// Also write the replay table and agreement CSV into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<DistanceMetric, String> {
    s.parse().map_err(|e: zest_core::Error| e.to_string())
}

/// How a command failed.
pub enum Failure {
    Usage(String),
    Operation(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Operation(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Plan(a) => commands::plan(a),
        Command::Sign(a) => commands::sign(a),
        Command::Dist(a) => commands::dist(a),
        Command::Select(a) => commands::select(a),
        Command::Attack(a) => commands::attack(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Campaign(a) => commands::campaign(a),
        Command::Serve(a) => commands::serve(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Operation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
