use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the reconstruction library.
///
/// The variants are grouped by the exit-code class the CLI maps them to:
/// input/data problems versus numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("frame {frame}: all joint confidences are zero")]
    ZeroConfidence { frame: usize },

    #[error("frame {frame}: input is not centralized (centroid norm {norm:.3e})")]
    NotCentralized { frame: usize, norm: f64 },

    #[error("ground truth covers {available:.3} s but {needed:.3} s were requested")]
    DurationMismatch { needed: f64, available: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("requested {requested} bases but the corpus only has rank {achievable}")]
    InsufficientRank { requested: usize, achievable: usize },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("objective increased from {previous:.6e} to {current:.6e} at round {round}")]
    Divergence {
        round: usize,
        previous: f64,
        current: f64,
        trace: Vec<f64>,
    },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sequence {sequence}, {velocity} deg/s: {source}")]
    SweepCell {
        sequence: usize,
        velocity: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical solvers, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::RankDeficient(_) => true,
            Error::Frame { source, .. } | Error::SweepCell { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_frame(self, frame: usize) -> Error {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}
