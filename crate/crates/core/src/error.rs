use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps `Validation`, `InvalidModel`, `Parse`, `Regime` and `Io` to exit
/// code 2 and `Numeric`/`Range` to exit code 3.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("numeric failure: {what} (achieved {achieved:.3e}, wanted {wanted:.3e})")]
    Numeric {
        what: String,
        achieved: f64,
        wanted: f64,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("parameter regime not admissible: {0}")]
    Regime(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn numeric(what: impl Into<String>, achieved: f64, wanted: f64) -> Self {
        Error::Numeric {
            what: what.into(),
            achieved,
            wanted,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Range(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::Numeric { .. } => "numeric",
            Error::Range(_) => "range",
            Error::Regime(_) => "regime",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
