use std::io;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    Convergence { sweeps: usize, off_norm: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("unknown user {0}")]
    MissingUser(String),

    #[error("missing embedding for item {0}")]
    MissingEmbedding(String),

    #[error("missing metadata for item {0}")]
    MissingMetadata(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("oracle protocol error: {0}")]
    OracleProtocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 1,
            Error::Divergence(_) | Error::Convergence { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
