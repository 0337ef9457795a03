use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at tape node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("simulation blew up at step {step} of trajectory {trajectory}")]
    Simulation { step: usize, trajectory: usize },

    #[error("feedback budget exceeded: requested {requested}, remaining {remaining}")]
    Budget { requested: usize, remaining: usize },

    #[error("degenerate density: {0}")]
    Degenerate(String),

    #[error("planner diverged at optimization step {step}: {reason}")]
    Planner { step: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io { .. } => 2,
            _ => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
