use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("camera footprint at ({x:.3}, {y:.3}) heading {heading:.3} exceeds the map raster")]
    FootprintOutOfBounds { x: f64, y: f64, heading: f64 },

    #[error("need at least {required} training images, got {actual}")]
    TooFewImages { required: usize, actual: usize },

    #[error("degenerate path: {0}")]
    DegeneratePath(String),

    #[error("empty window: prior ({x:.3}, {y:.3}) does not project onto the mapped path")]
    EmptyWindow { x: f64, y: f64 },

    #[error("degenerate frame: all kernel weights are zero or negative")]
    NoSignal,

    #[error("rendering grid pose {index} failed: {source}")]
    GridPose {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("too few successful registrations to align frames: need {required}, got {actual}")]
    TooFewSuccesses { required: usize, actual: usize },

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("unknown embedding for image fingerprint {0:#018x}")]
    UnknownFingerprint(u64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
