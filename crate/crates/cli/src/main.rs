//! `shuffleunet` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod chart;
mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SHUFFLEUNET_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "shuffleunet", version, about = "ShuffleUNet super-resolution of diffusion-weighted MR volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic DWI phantom subjects.
    Synth(SynthArgs),
    /// Simulate low resolution, sinc re-interpolate and split subjects.
    Prepare(PrepareArgs),
    /// Train a network on a prepared data set.
    Train(TrainArgs),
    /// Super-resolve volumes with a trained network or an interpolator.
    Infer(InferArgs),
    /// Compare predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit diffusion tensors and write derived maps.
    Derive(DeriveArgs),
    /// Two-sample t-test between methods.
    Stats(StatsArgs),
    /// Bar charts and a summary table from a metric report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    /// Grid size, `N` or `XxYxZ`.
    #[arg(long, default_value = "64")]
    pub dims: String,
    #[arg(long, default_value_t = 6)]
    pub directions: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub bval: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Key-value configuration file (`section.key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prepared data set directory.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint directory; defaults to `train.checkpoint_dir` or `<data>/checkpoints/<arch>`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `shuffleunet` or `unet`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<String>,
    #[arg(long)]
    pub patches_per_volume: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_filters: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A NIfTI file or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// shuffleunet, unet, sinc or trilinear.
    #[arg(long)]
    pub method: String,
    /// Upsampling factor for the interpolators.
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    /// Explicit interpolation target grid, `N` or `XxYxZ`.
    #[arg(long)]
    pub target_dims: Option<String>,
    #[arg(long, default_value = "96x96x48")]
    pub patch_size: String,
    #[arg(long, default_value = "16x16x8")]
    pub overlap: String,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Restrict a directory input to one section of a split manifest.
    #[arg(long, requires = "subset")]
    pub manifest: Option<PathBuf>,
    /// `train`, `validation` or `test`.
    #[arg(long, requires = "manifest")]
    pub subset: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, default_value = "ssim,rmse,uqi")]
    pub metrics: String,
    /// Method label; defaults to the name of the prediction directory.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value = "metrics.csv")]
    pub output: PathBuf,
    /// Add rows to an existing report instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    #[arg(long)]
    pub dwi_dir: PathBuf,
    /// Gradient tables shared by every subject; per-subject sidecars are used otherwise.
    #[arg(long, requires = "bvecs")]
    pub bvals: Option<PathBuf>,
    #[arg(long, requires = "bvals")]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Ground-truth DWI directory to compare the derived maps against.
    #[arg(long, requires = "report")]
    pub reference_dir: Option<PathBuf>,
    /// Metric report receiving the comparison rows.
    #[arg(long, requires = "reference_dir")]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub report_a: PathBuf,
    /// Defaults to `--report-a`.
    #[arg(long)]
    pub report_b: Option<PathBuf>,
    #[arg(long, default_value = "uqi")]
    pub metric: String,
    #[arg(long)]
    pub method_a: Option<String>,
    #[arg(long)]
    pub method_b: Option<String>,
    /// Use Welch's unequal-variance test.
    #[arg(long)]
    pub welch: bool,
    #[arg(long, default_value = "stats.csv")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Derive(a) => commands::derive(a),
        Command::Stats(a) => commands::stats(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
