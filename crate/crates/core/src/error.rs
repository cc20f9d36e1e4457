use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("model hash mismatch: map was built by {map}, query model is {model}")]
    ModelHashMismatch { map: String, model: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("batch has no same-room pair to use as a positive")]
    NoPositivePairs,

    #[error("pose ({x:.3}, {y:.3}) is inside a wall or outside the world")]
    InvalidPose { x: f64, y: f64 },

    #[error(
        "room {room} is too small to place samples {min_dist:.2} m away from ({x:.2}, {y:.2})"
    )]
    RoomTooSmall {
        room: usize,
        x: f64,
        y: f64,
        min_dist: f64,
    },

    #[error("unknown exemplar id {0}")]
    UnknownId(u32),

    #[error("every local search cell is unreachable")]
    NoReachableCell,

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
