use std::path::PathBuf;

/// Errors produced by the simulation and training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("degenerate symbol block: all-zero input has no power coefficient")]
    DegenerateBlock,

    #[error("empty input")]
    EmptyInput,

    #[error("requested {requested} images but the split only holds {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("invalid codec config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFinite { tensor: String },

    #[error("checkpoint config does not match the run config")]
    ConfigMismatch,

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
