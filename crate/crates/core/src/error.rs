use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular alignment: prediction is constant over {pixels} masked pixels")]
    SingularAlignment { pixels: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("incomplete table: {0}")]
    IncompleteTable(String),

    #[error(
        "non-finite loss at step {step} (data stream {data_stream}, noise stream {noise_stream})"
    )]
    NonFiniteLoss {
        step: u64,
        data_stream: u64,
        noise_stream: u64,
    },

    #[error("sample id mismatch: {0:?}")]
    IdMismatch(Vec<String>),

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::SingularAlignment { .. } => "singular_alignment",
            Error::EmptyMask => "empty_mask",
            Error::IncompleteTable(_) => "incomplete_table",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::IdMismatch(_) => "id_mismatch",
            Error::Missing(_) => "missing",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
