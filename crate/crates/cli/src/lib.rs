//! Command-line surface for the coscale engine: run configuration, the
//! checkpoint container, image emission and the command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod imageio;

pub use error::{CliError, CliResult};

/// Process exit codes: 0 success, 1 I/O, 2 usage/config, 3 missing artifact,
/// 4 invariant violation.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING: i32 = 3;
    pub const INVARIANT: i32 = 4;
}
