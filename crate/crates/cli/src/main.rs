//! `ogm`: synthesize, import, train, forecast, evaluate and compare
//! occupancy-grid predictors.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ogm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "ogm", version, about = "Occupancy-grid sequence prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes as OGS files plus a manifest
    Synth(SynthArgs),
    /// Convert per-frame images into an OGS file
    Import(ImportArgs),
    /// Train a predictor and write a checkpoint and loss log
    Train(TrainArgs),
    /// Forecast from the last observed frames of an OGS file
    Predict(PredictArgs),
    /// Score a checkpoint or the linear baseline and write a metrics CSV
    Eval(EvalArgs),
    /// Merge metric CSVs into comparison tables and plot data
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, env = "OGMPRED_DATA")]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid side in cells; the covered area stays 32 x 32 m
    #[arg(long)]
    grid: Option<usize>,
    /// Probability of flipping each cell
    #[arg(long)]
    noise: Option<f64>,
    /// Scene template (`key = value` file)
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, env = "OGMPRED_DATA")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CellArg {
    Stlstm,
    Convlstm,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Separate,
    Combined,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "OGMPRED_DATA")]
    data: PathBuf,
    /// Training and model settings (`key = value` file)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    cell: Option<CellArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, env = "OGMPRED_CKPT")]
    out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with `.loss.csv`
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, env = "OGMPRED_CKPT")]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineArg {
    Linear,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// The held-out part of the checkpoint's training split
    Test,
    /// The training part
    Train,
    /// Every sequence
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(
        long,
        env = "OGMPRED_CKPT",
        conflicts_with = "baseline",
        required_unless_present = "baseline"
    )]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, env = "OGMPRED_DATA")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `test` for checkpoints and `all` for the baseline
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, default_value_t = 11)]
    ssim_window: usize,
    /// Observed frames the baseline sees
    #[arg(long, default_value_t = 9, requires = "baseline")]
    t_in: usize,
    /// Frames the baseline forecasts
    #[arg(long, default_value_t = 6, requires = "baseline")]
    t_out: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    csv: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
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
        Command::Import(a) => commands::import(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
