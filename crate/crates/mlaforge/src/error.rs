//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch in a linear-algebra operation or tensor contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// File does not start with the checkpoint magic.
    #[error("bad magic: expected MLAFORGE, found {found:?}")]
    Magic { found: Vec<u8> },

    /// Unsupported checkpoint version (also triggered by byte-swapped headers).
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A tensor named in the manifest is missing or has the wrong shape/dtype.
    #[error("manifest error for tensor `{name}`: {detail}")]
    Manifest { name: String, detail: String },

    /// File ends before the data the header promises.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Any other malformed input (bad JSON, non-finite tensor entries, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Stats JSON does not match the model it is used with.
    #[error("stats schema error: {0}")]
    Schema(String),

    /// Invalid model or conversion configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Iterative SVD did not converge within the sweep cap.
    #[error("SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    /// An exactness-chain link exceeded its tolerance.
    #[error("verification failed: {0}")]
    Verify(String),

    /// Bad command-line usage.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 usage, 3 format, 4 verification
    /// failure, 5 numeric non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Shape(_)
            | Error::Magic { .. }
            | Error::Version { .. }
            | Error::Manifest { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::Schema(_)
            | Error::Io(_) => 3,
            Error::Verify(_) => 4,
            Error::NonConvergence { .. } => 5,
        }
    }
}
