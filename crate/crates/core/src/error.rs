//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller broke a shape or length contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown {kind} `{name}`; valid options: {}", options(valid))]
    Lookup {
        kind: &'static str,
        name: String,
        valid: Vec<String>,
    },

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// Non-finite loss, gradient or parameter.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {} at byte {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A hyperparameter study produced nothing usable.
    #[error("study failed: {0}")]
    Study(String),

    /// An on-disk artifact exists but cannot be interpreted.
    #[error("corrupt file {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors the CLI reports with exit code 1 rather than 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Lookup { .. } | Error::Contract(_) | Error::Precondition(_)
        )
    }
}

fn options(valid: &[String]) -> String {
    if valid.is_empty() {
        "(none)".to_string()
    } else {
        valid.join(", ")
    }
}
