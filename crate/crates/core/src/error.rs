use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{what} {size} is not divisible by {divisor}; pad or resize the input")]
    Indivisible {
        what: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("dataset at {root} is empty")]
    EmptyDataset { root: PathBuf },

    #[error("missing {kind} for frame {frame}")]
    MissingFrameFile { kind: &'static str, frame: String },

    #[error("unpaired file with stem `{stem}`: {reason}")]
    Unpaired { stem: String, reason: &'static str },

    #[error("bad .flo magic in {path}: expected PIEH, found {found:?}")]
    BadFlowMagic { path: PathBuf, found: [u8; 4] },

    #[error("truncated .flo payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedFlow {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid .flo dimensions {width}x{height} in {path}")]
    FlowDims {
        path: PathBuf,
        width: i32,
        height: i32,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("non-finite loss {loss} at step {step} ({provenance})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        provenance: String,
    },

    #[error("non-binary mask value {value} at pixel {index}")]
    NonBinaryMask { value: f32, index: usize },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
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

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Indivisible { .. } | Error::Config { .. } => {
                ErrorClass::Usage
            }
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
