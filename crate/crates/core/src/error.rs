//! Error type shared across the crate.
//!
//! Every failure carries a category (stable, machine-readable) and a human
//! message. The CLI maps categories to exit codes and emits them on stderr.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse: a precondition stated by an operation's contract failed.
    #[error("contract error: {0}")]
    Contract(String),

    /// A completed operation produced NaN or infinite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Federation protocol violation (e.g. missing global prototype).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Partition request that cannot be satisfied.
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    /// Malformed content in an input file.
    #[error("parse error: {0}")]
    Parse(String),

    /// Structurally invalid input file (empty, missing header).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category token for machine consumption.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "nonfinite",
            Error::Protocol(_) => "protocol",
            Error::InfeasiblePartition(_) => "partition",
            Error::Parse(_) => "parse",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
