use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A hyperparameter or configuration value is out of range or unknown.
    #[error("{0}")]
    Config(String),

    /// Malformed bytes in one of the binary file formats.
    #[error("{what} at byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    /// Data that parsed but breaks a documented invariant.
    #[error("{0}")]
    Validation(String),

    /// Two well-formed artifacts that cannot be used together.
    #[error("{0}")]
    Compat(String),

    /// A metric is not defined for the given labels (e.g. AUROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Category prefix used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Compat(_) => "COMPAT",
            Error::Config(_) => "CONFIG",
            Error::Format { .. } => "FORMAT",
            Error::Validation(_) | Error::UndefinedMetric(_) => "VALIDATION",
            Error::Io { .. } => "IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
