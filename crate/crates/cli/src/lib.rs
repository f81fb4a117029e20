//! Batch runner for qlab scenarios: TOML in, JSON/CSV/plot data out.

use std::path::{Path, PathBuf};

pub mod diff;
pub mod output;
pub mod pipeline;
pub mod report;
pub mod scenario;

pub use pipeline::{run, RunOptions};
pub use report::Report;
pub use scenario::Scenario;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const HARD_FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const UNRESOLVABLE: i32 = 5;
    pub const OUT_OF_BOX: i32 = 6;
    pub const SOFT_REGRESSION: i32 = 7;
    pub const NUMERICAL: i32 = 8;
    pub const DIFF_REGRESSION: i32 = 9;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Core(#[from] qlab_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use qlab_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                E::InvalidGrid(_) | E::InvalidParameter(_) => exit::CONFIG,
                E::Unresolvable(_) => exit::UNRESOLVABLE,
                E::OutOfBox(_) => exit::OUT_OF_BOX,
                E::Io(_) => exit::IO,
                E::GridMismatch | E::EmptyRegion(_) | E::NonIntegrable(_) | E::Solver(_) | E::Format(_) => exit::NUMERICAL,
            },
        }
    }
}
