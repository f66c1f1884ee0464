//! `prunebench` command-line front end.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunebench::Error;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "prunebench", version, about = "CNN channel pruning, argmax benchmark, metrics and top-view stitching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a randomly initialized ENet-style model and save it.
    Build(BuildArgs),
    /// Run a model on an input tensor and write the label map.
    Infer(InferArgs),
    /// Prune a model's residual blocks with LASSO channel selection.
    Prune(PruneArgs),
    /// Time the serial and parallel argmax heads.
    BenchArgmax(BenchArgs),
    /// Report FLOPs, parameters and model size.
    Flops(FlopsArgs),
    /// Per-class IoU, mean IoU and global accuracy for label maps.
    Eval(EvalArgs),
    /// Stitch four fisheye label maps into a top-view label map.
    BevStitch(BevArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    /// Channel width multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model file.
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: String,
    /// Input tensor dump (N, C, H, W).
    #[arg(long)]
    pub input: String,
    /// Output label map dump.
    #[arg(long)]
    pub out: String,
    /// Argmax workers; defaults to PRUNEBENCH_THREADS or the core count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Optional colour-mapped PPM of the first label map.
    #[arg(long)]
    pub ppm: Option<String>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 1.1)]
    pub shallow_factor: f64,
    #[arg(long, default_value_t = 1.25)]
    pub deep_factor: f64,
    /// Patches sampled per calibration image and layer.
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-layer report CSV.
    #[arg(long)]
    pub report: Option<String>,
    /// Calibration tensor dump; synthetic images are generated when absent.
    #[arg(long)]
    pub calib: Option<String>,
    /// Number of synthetic calibration images.
    #[arg(long, default_value_t = 8)]
    pub calib_count: usize,
    /// Synthetic calibration image size, WIDTHxHEIGHT.
    #[arg(long, default_value = "128x128")]
    pub calib_size: String,
    /// Blocks to leave unpruned, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Input size for the FLOP columns, WIDTHxHEIGHT.
    #[arg(long, default_value = "640x400")]
    pub input: String,
    /// Operations per multiply-accumulate (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub mac: u32,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Score tensor shape N,C,H,W.
    #[arg(long, default_value = "1,20,400,640")]
    pub shape: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Parallel workers; defaults to PRUNEBENCH_THREADS or the core count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Implementations to time, comma separated.
    #[arg(long = "impl", value_delimiter = ',', default_value = "serial,parallel")]
    pub implementations: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub model: String,
    /// Input size, WIDTHxHEIGHT.
    #[arg(long, default_value = "640x400")]
    pub input: String,
    /// Operations per multiply-accumulate (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub mac: u32,
    /// Leave the argmax head's comparisons out of the count.
    #[arg(long)]
    pub no_head: bool,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of ground-truth label dumps.
    #[arg(long)]
    pub truth: String,
    /// Directory of predicted label dumps with matching file names.
    #[arg(long)]
    pub pred: String,
    #[arg(long)]
    pub classes: usize,
    /// Label value excluded from scoring.
    #[arg(long, default_value_t = 255)]
    pub ignore: u32,
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args)]
pub struct BevArgs {
    /// Camera rig TOML file.
    #[arg(long)]
    pub calib: String,
    /// One label dump per camera, in rig order, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub labels: Vec<String>,
    /// Grid as XxYm@RES, for example 20x20m@0.05.
    #[arg(long, default_value = "20x20m@0.05")]
    pub grid: String,
    #[arg(long)]
    pub out: String,
    #[arg(long)]
    pub ppm: Option<String>,
    /// Parallel workers; defaults to PRUNEBENCH_THREADS or the core count.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Command {
    fn seed(&self) -> Option<u64> {
        match self {
            Command::Build(a) => Some(a.seed),
            Command::Prune(a) => Some(a.seed),
            Command::BenchArgmax(a) => Some(a.seed),
            _ => None,
        }
    }
}

fn config_hash(cmd: &Command) -> String {
    let digest = Sha256::digest(format!("{cmd:?}").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Numeric(_) => 5,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli
        .command
        .seed()
        .map_or_else(|| "none".to_string(), |s| s.to_string());
    println!(
        "# prunebench {} seed={seed} config={}",
        env!("CARGO_PKG_VERSION"),
        config_hash(&cli.command)
    );
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
