use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("evaluation tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },
}

impl Error {
    /// Short machine-readable class, e.g. `missing_file` or `format`.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => "missing_file",
            Error::Io { .. } => "io",
            Error::BadMagic(_)
            | Error::CorruptHeader(_)
            | Error::Version { .. }
            | Error::Truncated(_) => "format",
            Error::Config(_) | Error::InvalidSpec(_) | Error::Json(_) => "config",
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Diverged { .. } => {
                "numeric"
            }
            Error::Shape(_)
            | Error::Layer { .. }
            | Error::TapeConsumed
            | Error::Csv(_)
            | Error::Empty(_)
            | Error::Dataset(_) => "data",
        }
    }

    /// Process exit code for the category; 2 is left to usage errors.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "missing_file" => 3,
            "format" => 4,
            "config" => 5,
            "numeric" => 6,
            "io" => 7,
            _ => 8,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
