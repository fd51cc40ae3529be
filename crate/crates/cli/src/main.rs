//! `cassi`: simulate, reconstruct, evaluate, plot and train from the command line.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cassi", version, about = "Coded-aperture snapshot spectral imaging toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a measurement from a scene and a coded mask.
    Simulate(SimulateArgs),
    /// Recover a cube from a measurement.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against ground truth.
    Eval(EvalArgs),
    /// Render band grids, spectral curves and operator maps as PNG.
    Plot(PlotArgs),
    /// Train the unfolding network from a TOML config.
    Train(TrainArgs),
    /// Print per-stage and per-component parameter counts.
    Census(CensusArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Ground-truth cube (HSIC file).
    #[arg(conflicts_with = "synthetic")]
    pub scene: Option<PathBuf>,
    /// Generate a synthetic scene of size HxWxC instead.
    #[arg(long, value_name = "HxWxC")]
    pub synthetic: Option<String>,
    /// Coded mask (HSIC file).
    #[arg(long, conflicts_with = "random_mask")]
    pub mask: Option<PathBuf>,
    /// Draw a random mask instead.
    #[arg(long)]
    pub random_mask: bool,
    #[arg(long, value_enum, default_value_t = MaskArg::Binary)]
    pub mask_kind: MaskArg,
    /// Dispersion shift per band, in pixels.
    #[arg(long, default_value_t = 2)]
    pub step: usize,
    /// Add Poisson shot noise at this bit depth.
    #[arg(long)]
    pub noise_bits: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MaskArg {
    Binary,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Method {
    Rdluf,
    Gaptv,
    Pgdtv,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Trained model (required for rdluf).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub measurement: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Dispersion step for the classical solvers.
    #[arg(long, default_value_t = 2)]
    pub step: usize,
    /// Solver iterations for gaptv and pgdtv.
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// TV weight for gaptv and pgdtv.
    #[arg(long, default_value_t = 0.05)]
    pub tv_weight: f64,
    /// Output cube (HSIC file).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Reconstructions, paired in order with --truth.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    /// Region for spectral correlation, as top,left,height,width.
    #[arg(long)]
    pub roi: Option<String>,
    /// Report file; defaults to eval_report.txt beside the first prediction.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Single cube to show as a band grid.
    #[arg(long)]
    pub cube: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    /// Number of evenly spaced bands in each grid.
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    /// Region for spectral curves, as top,left,height,width.
    #[arg(long)]
    pub roi: Option<String>,
    /// Render Φ, R and Φ̂ maps per stage (needs --checkpoint, --measurement, --mask).
    #[arg(long, requires_all = ["checkpoint", "measurement", "mask"])]
    pub residual_viz: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub measurement: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Band shown in the operator maps.
    #[arg(long, default_value_t = 0)]
    pub viz_band: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML with [model], [train] and [data] tables.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CensusArgs {
    /// Model or training config (TOML).
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Failure reported on one line of standard error.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage", message: message.into() }
    }
}

impl From<cassi_core::Error> for Failure {
    fn from(e: cassi_core::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { kind: "io", message: e.to_string() }
    }
}

pub type CmdResult = Result<(), Failure>;

fn report(f: &Failure) {
    let line = serde_json::json!({ "error": f.kind, "message": f.message.replace('\n', " | ") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            report(&Failure::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Train(a) => commands::train(&a),
        Command::Census(a) => commands::census(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(if matches!(f.kind, "usage" | "argument") { 2 } else { 1 })
        }
    }
}
