use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-binary {role} value `{value}` in column `{column}`")]
    NonBinary {
        role: &'static str,
        column: String,
        value: String,
    },

    #[error("unparseable numeric `{value}` in column `{column}` (row {row})")]
    BadNumeric {
        column: String,
        value: String,
        row: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel covariance is singular after jitter escalation")]
    SingularKernel,

    #[error("non-finite state at iteration {iteration}: {what}")]
    NanAbort { iteration: usize, what: String },

    #[error("no overlap: dataset contains a single treatment arm")]
    NoOverlap,

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
