//! Crate-wide error type.
//!
//! Variants are grouped by how the experiment harness reacts to them:
//! configuration problems abort before any work starts, numerical
//! problems abort a run mid-flight (carrying the iteration index), and
//! ingestion problems identify the offending input file or subject.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch in a graph operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration (dimensions, hyperparameters, grids).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Numerical failure: domain error or non-finite value. `iteration`
    /// is populated when the failure surfaced inside a training loop.
    #[error("numerical error{}: {detail}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numerical {
        detail: String,
        iteration: Option<u64>,
    },

    /// Ingestion failure: missing metadata, malformed matrix file, …
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Malformed binary cache / checkpoint file.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("I/O error{}: {source}", path.as_ref().map(|p| format!(" on {p}")).unwrap_or_default())]
    Io {
        #[source]
        source: std::io::Error,
        path: Option<String>,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { source, path: None }
    }
}

impl Error {
    /// Numerical error outside a training loop.
    pub fn numerical(detail: impl Into<String>) -> Self {
        Error::Numerical {
            detail: detail.into(),
            iteration: None,
        }
    }

    /// Numerical error attributed to a training iteration.
    pub fn numerical_at(iteration: u64, detail: impl Into<String>) -> Self {
        Error::Numerical {
            detail: detail.into(),
            iteration: Some(iteration),
        }
    }

    /// Attach a path to an I/O error.
    pub fn io_at(source: std::io::Error, path: impl AsRef<std::path::Path>) -> Self {
        Error::Io {
            source,
            path: Some(path.as_ref().display().to_string()),
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 numerical, 4 ingestion,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Ingest(_) => 4,
            _ => 1,
        }
    }
}
