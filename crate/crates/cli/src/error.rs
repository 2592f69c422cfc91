use thiserror::Error;

use crate::exit_code;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unparseable or invalid configuration.
    #[error("{0}")]
    Usage(String),

    /// A referenced file (checkpoint, mask, fixtures) does not exist.
    #[error("missing artifact: {0}")]
    Missing(String),

    /// A checked invariant failed (corrupt checkpoint, fixture mismatch,
    /// engine contract violation).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit_code::USAGE,
            CliError::Missing(_) => exit_code::MISSING,
            CliError::Invariant(_) => exit_code::INVARIANT,
            CliError::Io(_) => exit_code::IO,
        }
    }
}

impl From<coscale_core::Error> for CliError {
    fn from(e: coscale_core::Error) -> Self {
        match e {
            coscale_core::Error::InsufficientSamples(msg) => CliError::Usage(msg),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
