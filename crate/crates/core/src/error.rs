use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("missing column `{column}`")]
    Schema { column: String },

    #[error("cannot parse `{value}` at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("validation failed: {message} (first offending rows: {rows:?})")]
    Validation { message: String, rows: Vec<usize> },

    #[error(
        "steady solver did not converge after {iterations} iterations (last residual {residual:e})"
    )]
    Solver { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("non-finite value in loss term `{term}`")]
    Loss { term: String },

    #[error("non-finite gradient in parameter block `{block}`")]
    Gradient { block: String },

    #[error("tape does not belong to the current network parameters")]
    StaleTape,

    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("model file is corrupt: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end:
    /// 1 usage, 2 validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Shape { .. } | Error::StaleTape => 1,
            Error::Schema { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Integrity(_)
            | Error::Io { .. } => 2,
            Error::Solver { .. }
            | Error::Training { .. }
            | Error::Loss { .. }
            | Error::Gradient { .. } => 3,
        }
    }
}
