use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diffusion step {step} outside [0, {max}]")]
    StepRange { step: usize, max: usize },

    #[error("inference steps must be non-empty, within [1, S] and strictly descending")]
    StepOrder,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("track {track_id} has no observation within {radius} frames of frame {frame}")]
    MissingObservation {
        track_id: usize,
        frame: usize,
        radius: usize,
    },

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("viewing ray is parallel to the table plane")]
    NoIntersection,

    #[error("table plane intersection lies behind the camera")]
    IntersectionBehindCamera,

    #[error("IK target unreachable (best residual {residual:.6} m)")]
    UnreachableTarget { residual: f64 },

    #[error("plan infeasible at step {step}: best IK residual {residual:.6} m")]
    PlanInfeasible { step: usize, residual: f64 },

    #[error("scene error: {0}")]
    Scene(String),

    #[error("plan references unknown object {0:?}")]
    PlanObjectMismatch(String),

    #[error("cannot score an empty batch")]
    EmptyBatch,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Domain failures map to exit code 3, everything else to 2.
    pub fn is_domain_failure(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::UnreachableTarget { .. }
                | Error::PlanInfeasible { .. }
                | Error::PlanObjectMismatch(_)
                | Error::Scene(_)
                | Error::Domain(_)
        )
    }
}
