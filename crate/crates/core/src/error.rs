use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate Euler decomposition: pitch within {margin:e} rad of gimbal lock")]
    DegenerateDecomposition { margin: f64 },

    #[error("no ground plane found: {0}")]
    NoGroundFound(String),

    #[error("ambiguous ground orientation: {0}")]
    AmbiguousGround(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("no overlap between master and slave: {0}")]
    NoOverlap(String),

    #[error("correspondence starvation: {found} correspondences (need at least {required})")]
    CorrespondenceStarvation { found: usize, required: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CalibError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CalibError::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;
