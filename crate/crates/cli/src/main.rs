//! `convcaps`: phantom generation, training, evaluation, inference, model
//! inspection and a self-test over the library's invariants.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage error, 3 I/O error.
//! `CAPS_THREADS` caps the worker pool (default: available cores).

mod commands;
mod config;
mod data;
mod selftest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    /// Unreadable, unwritable or malformed files.
    Io(String),
    /// A run or check that did not succeed.
    Failure(String),
}

impl CliError {
    pub fn from_core(e: convcaps::Error) -> Self {
        use convcaps::Error as E;
        match e {
            E::Io(_)
            | E::Json(_)
            | E::Truncated(_)
            | E::Format(_)
            | E::VersionMismatch { .. }
            | E::Checkpoint(_)
            | E::UnknownArch(_) => CliError::Io(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{what}: {m}")),
            CliError::Failure(m) => CliError::Failure(format!("{what}: {m}")),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

fn triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let parse = |p: &str| p.parse::<T>().map_err(|_| format!("invalid value `{p}`"));
    Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?])
}

fn extents(s: &str) -> Result<[usize; 3], String> {
    triple(s)
}

fn spacing(s: &str) -> Result<[f64; 3], String> {
    triple(s)
}

#[derive(Parser)]
#[command(name = "convcaps", version, about = "Volumetric segmentation with 3D convolutional capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes, labels and a manifest.
    GenData(GenDataArgs),
    /// Train a network on a manifest; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint against labelled volumes; prints JSON.
    Eval(EvalArgs),
    /// Segment one volume by sliding-window inference.
    Infer(InferArgs),
    /// Print the layer table of a checkpoint or configuration.
    Inspect(InspectArgs),
    /// Run gradient, routing, loss and metric checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Extents X,Y,Z, each a multiple of 8.
    #[arg(long, default_value = "64,64,64", value_parser = extents)]
    pub size: [usize; 3],
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub modalities: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Voxel spacing in mm.
    #[arg(long, default_value = "1,1,1", value_parser = spacing)]
    pub spacing: [f64; 3],
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key = value file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// convcaps or baseline.
    #[arg(long)]
    pub arch: Option<String>,
    /// Further `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Data manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Score the labels against themselves instead of predictions.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "32,32,32", value_parser = extents)]
    pub patch: [usize; 3],
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Label volume to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "32,32,32", value_parser = extents)]
    pub patch: [usize; 3],
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with_all = ["config", "arch"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct SelftestArgs {
    /// Inject a fault to show the checks catch it: squash, margin or surface.
    #[arg(long)]
    pub sabotage: Option<String>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CAPS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("CAPS_THREADS = `{raw}` must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Selftest(a) => selftest::run(a.sabotage.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
