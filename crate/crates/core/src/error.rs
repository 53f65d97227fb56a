use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("missing embedding for {} description(s): {}", .0.len(), .0.join(" | "))]
    MissingEmbedding(Vec<String>),

    #[error("generation error: {0}")]
    Generation(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: cross-entropy={cross_entropy}, distance={distance}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        cross_entropy: f64,
        distance: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Precondition(_) => "precondition",
            Error::Format { .. } => "format",
            Error::Lookup(_) => "lookup",
            Error::MissingEmbedding(_) => "missing-embedding",
            Error::Generation(_) => "generation",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
