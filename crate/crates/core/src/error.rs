use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, ordering, sign).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter group `{group}` (slot {slot})")]
    NonFiniteGradient { group: String, slot: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("layer has zero width ({inputs} -> {outputs})")]
    ZeroWidth { inputs: usize, outputs: usize },

    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: usize, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Non-finite loss or gradient during optimization.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })
    }

    /// Malformed or missing input files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::InvalidFrame { .. }
                | Error::InvalidDataset(_)
                | Error::VersionMismatch { .. }
                | Error::CorruptCheckpoint(_)
                | Error::EmptySplit(_)
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::Image { .. }
        )
    }
}
