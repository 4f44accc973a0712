//! `mirror-splat` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
//! Log verbosity comes from `REFLECTIVE_LOG` (`error`, `info`, `debug`).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mirror-splat", version, about = "Mirror-aware Gaussian splatting")]
pub struct Cli {
    /// Worker threads. Results are bit-reproducible for a fixed count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mirror scene with an occluded face.
    Generate(GenerateArgs),
    /// Run staged training on a dataset directory.
    Train(TrainArgs),
    /// Render a checkpoint from a cameras.json file.
    Render(RenderArgs),
    /// Score render directories against dataset frames.
    Eval(EvalArgs),
    /// Select mirror Gaussians in a checkpoint and fit the plane.
    FitPlane(FitPlaneArgs),
    /// Convert a COLMAP text model to cameras.json and points.ply.
    ConvertColmap(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Training camera count.
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub mirror_yaw: Option<f64>,
    #[arg(long)]
    pub mirror_distance: Option<f64>,
    #[arg(long)]
    pub face_grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// none, no-reflection, plane-error=P or no-sym-loss.
    #[arg(long, default_value = "none")]
    pub ablate: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    #[arg(long)]
    pub stage2_iters: Option<usize>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_sym: Option<f64>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    #[arg(long)]
    pub max_gaussians: Option<usize>,
    #[arg(long)]
    pub refit_interval: Option<usize>,
    /// Keep optimizing mirror factors after the plane fit.
    #[arg(long)]
    pub train_mirror_factors: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop Gaussians behind the fitted plane, for views taken without the mirror.
    #[arg(long)]
    pub mirror_removed: bool,
    /// Background color as r,g,b in [0,1].
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Heldout,
    Train,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// One or more directories of `<frame id>.png` renders.
    #[arg(long, required = true, num_args = 1..)]
    pub renders: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also score the detail boxes from detail_boxes.json.
    #[arg(long)]
    pub detail: bool,
    /// Write GT | render | difference strips per frame.
    #[arg(long)]
    pub strips: bool,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct FitPlaneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = mirror_splat::mirror::DEFAULT_MIRROR_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = mirror_splat::mirror::DEFAULT_RANSAC_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = mirror_splat::mirror::DEFAULT_INLIER_FRACTION)]
    pub inlier_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the plane record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Directory holding cameras.txt, images.txt and optionally points3D.txt.
    #[arg(long)]
    pub sparse: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REFLECTIVE_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
