//! File formats, dataset readers and the `nestnet` command line for the
//! [`nestnet_core`] engine.
//!
//! - [`container`]: versioned, checksummed binary model files plus a TOML
//!   sidecar.
//! - [`csvio`]: `L × C` tables and the metrics log as CSV.
//! - [`cifar`]: the CIFAR-10 binary reader.
//! - [`config`]: architecture files and the resolved run configuration.
//! - [`cli`]: the subcommands behind the `nestnet` binary.

pub use nestnet_core as core;

pub mod cifar;
pub mod cli;
pub mod config;
pub mod container;
pub mod csvio;

/// Why a command stopped. Each variant maps to a documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("no slice fits the budget: {0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Failure {
    pub const EXIT_IO: i32 = 1;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_DATA: i32 = 3;
    pub const EXIT_INFEASIBLE: i32 = 4;
    pub const EXIT_VERIFICATION: i32 = 5;

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Io(_) => Self::EXIT_IO,
            Failure::Config(_) => Self::EXIT_CONFIG,
            Failure::Data(_) => Self::EXIT_DATA,
            Failure::Infeasible(_) => Self::EXIT_INFEASIBLE,
            Failure::Verification(_) => Self::EXIT_VERIFICATION,
        }
    }
}

impl From<container::ContainerError> for Failure {
    fn from(e: container::ContainerError) -> Self {
        match e {
            container::ContainerError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<csvio::CsvError> for Failure {
    fn from(e: csvio::CsvError) -> Self {
        match e {
            csvio::CsvError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<cifar::CifarError> for Failure {
    fn from(e: cifar::CifarError) -> Self {
        Failure::Data(e.to_string())
    }
}
