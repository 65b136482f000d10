use std::path::PathBuf;

/// Errors surfaced by the fallible parts of the pipeline (file formats,
/// configuration, training aborts, metric preconditions).
///
/// Tensor shape contract violations are programmer errors and panic with a
/// descriptive message instead of flowing through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("train: {0}")]
    Train(String),

    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI exit lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Train(_) => "train",
            Error::Metric(_) => "metric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
