//! Config files, flag overrides and the CLI error type.

use std::fmt;
use std::path::Path;

use orbit_mocap::camera::OrbitSpec;
use orbit_mocap::io;
use orbit_mocap::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::{OrbitFlags, SolverFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// The run finished but a requested check failed.
    Check(String),
    Lib(orbit_mocap::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Check(_) => 2,
            CliError::Lib(e) if e.is_numerical() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<orbit_mocap::Error> for CliError {
    fn from(e: orbit_mocap::Error) -> Self {
        CliError::Lib(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Contents of a `--config` file. Every block is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub orbit: OrbitSpec,
    pub pipeline: PipelineConfig,
}

pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => io::read_json(p).map_err(|e| CliError::Usage(format!("config: {e}"))),
    }
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn apply_orbit(spec: &mut OrbitSpec, f: &OrbitFlags) -> CliResult<()> {
    set(&mut spec.omega_deg_s, f.omega_deg_s);
    set(&mut spec.fps, f.fps);
    set(&mut spec.duration_s, f.duration_s);
    set(&mut spec.elevation_deg, f.elevation_deg);
    set(&mut spec.noise, f.noise);
    set(&mut spec.outlier_rate, f.outlier_rate);
    set(&mut spec.outlier_mag, f.outlier_mag);
    set(&mut spec.seed, f.seed);
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn apply_solver(cfg: &mut PipelineConfig, f: &SolverFlags) -> CliResult<()> {
    set(&mut cfg.ba.gamma, f.gamma);
    if f.alpha.is_some() {
        cfg.ba.alpha = f.alpha;
    }
    set(&mut cfg.ba.alpha_rel, f.alpha_rel);
    set(&mut cfg.ba.outer_iters, f.outer_iters);
    if f.lambda1.is_some() {
        cfg.init.lambda1 = f.lambda1;
    }
    set(&mut cfg.init.restarts, f.restarts);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}
