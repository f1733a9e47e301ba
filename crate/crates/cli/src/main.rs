//! `orbit-mocap`: synthesise orbit tracks, learn dictionaries, reconstruct
//! and evaluate.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "orbit-mocap",
    version,
    about = "3D human motion from 2D joint tracks seen by an orbiting camera"
)]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, env = "ORBIT_MOCAP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project 3D poses through a virtual orbiting camera.
    Synth(SynthArgs),
    /// Learn a PCA pose dictionary from a directory of 3D pose CSVs.
    LearnDict(LearnDictArgs),
    /// Reconstruct 3D poses and cameras from 2D tracks.
    Reconstruct(ReconstructArgs),
    /// Compare estimated poses with ground truth.
    Eval(EvalArgs),
    /// Error as a function of the camera's angular velocity.
    Sweep(SweepArgs),
}

/// Camera orbit flags; unset flags fall back to the config file, then to
/// the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct OrbitFlags {
    #[arg(long)]
    pub omega_deg_s: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub elevation_deg: Option<f64>,
    /// Standard deviation of the 2D noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long)]
    pub outlier_mag: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Solver flags shared by `reconstruct` and `sweep`.
#[derive(Debug, Clone, Default, Args)]
pub struct SolverFlags {
    /// Articulation weight; 0 disables the limb term.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Absolute nuclear-norm weight (overrides --alpha-rel).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Nuclear-norm weight relative to the initial shapes' top singular value.
    #[arg(long)]
    pub alpha_rel: Option<f64>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    /// L1 weight of the per-frame coefficient fit.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Camera seeds per frame.
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Ground-truth 3D poses (`frame,joint,x,y,z`).
    #[arg(long)]
    pub poses: PathBuf,
    /// Frame rate of the ground truth; defaults to the orbit frame rate.
    #[arg(long)]
    pub gt_fps: Option<f64>,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// JSON config with an `orbit` block.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub orbit: OrbitFlags,
}

#[derive(Debug, Args)]
pub struct LearnDictArgs {
    /// Directory of 3D pose CSVs.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of bases. Without it, 64 or the corpus rank if that is lower.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Keep the corpus poses' orientation.
    #[arg(long)]
    pub no_align: bool,
    /// Keep the corpus poses' size.
    #[arg(long)]
    pub no_normalize: bool,
    /// Output dictionary file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// 2D tracks (`frame,joint,u,v,conf`).
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Frame rate of the tracks.
    #[arg(long)]
    pub fps: Option<f64>,
    /// JSON config with a `pipeline` block.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stop after the per-frame initialisation.
    #[arg(long)]
    pub skip_ba: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated 3D poses.
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth 3D poses.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Comma-separated joint names; defaults to the evaluation set.
    #[arg(long, value_delimiter = ',')]
    pub joints: Option<Vec<String>>,
    /// Sequence name used in the reports.
    #[arg(long, default_value = "sequence")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Ground-truth sequences; alternatively use --planted.
    #[arg(long, num_args = 1.., conflicts_with = "planted")]
    pub gt: Vec<PathBuf>,
    /// Number of bundled synthetic sequences to generate instead of --gt.
    #[arg(long)]
    pub planted: Option<usize>,
    /// Frames per synthetic sequence.
    #[arg(long, default_value_t = 240)]
    pub frames: usize,
    /// Frame rate of the ground truth.
    #[arg(long)]
    pub gt_fps: Option<f64>,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Comma-separated angular velocities in deg/s.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub velocities: Option<Vec<f64>>,
    /// JSON config with `orbit` and `pipeline` blocks.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exit with status 2 unless the camera-motion trend holds.
    #[arg(long)]
    pub check_trend: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub orbit: OrbitFlags,
    #[command(flatten)]
    pub solver: SolverFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::LearnDict(a) => commands::learn_dict(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
