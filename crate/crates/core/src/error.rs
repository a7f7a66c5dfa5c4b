use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid landmark map: {0}")]
    InvalidLandmarkMap(String),

    #[error("expected {expected} coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),

    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate triangle at face {face} (area {area:e})")]
    DegenerateTriangle { face: usize, area: f64 },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("transfer of blendshape '{name}' failed: {source}")]
    ShapeTransfer {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("inter-ocular distance is zero")]
    ZeroInterocular,

    #[error("landmark region '{0}' is empty")]
    EmptyRegion(String),

    #[error("invalid prior spec: {0}")]
    InvalidPrior(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in layer '{0}'")]
    NonFinite(String),

    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,

    #[error("unknown blendshape name '{0}'")]
    UnknownName(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            msg: msg.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::DegenerateRotation(_)
            | Error::BehindCamera { .. }
            | Error::DegenerateTriangle { .. }
            | Error::CgNotConverged { .. }
            | Error::ZeroInterocular
            | Error::NonFinite(_)
            | Error::NonFiniteObjective => ErrorKind::Numeric,
            Error::ShapeTransfer { source, .. } => source.kind(),
            _ => ErrorKind::Config,
        }
    }
}
