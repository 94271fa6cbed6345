//! Experiment runner behind the `sparce` binary.

pub mod artifacts;
pub mod config;
pub mod fetch;
pub mod runner;

use std::fmt;

/// Failure classes, one per process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    DataMissing(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::DataMissing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::DataMissing(m) => write!(f, "data missing: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sparce::Error> for CliError {
    fn from(e: sparce::Error) -> Self {
        use sparce::Error as E;
        let m = e.to_string();
        match e {
            E::DataMissing(_) | E::Idx(_) => CliError::DataMissing(m),
            E::NonFiniteGradient { .. } | E::EigenNoConvergence(_) | E::Undefined(_) => CliError::Numeric(m),
            E::InvalidParameter(_)
            | E::DimensionMismatch { .. }
            | E::EmptyRecurrentMatrix { .. }
            | E::DegenerateSpectrum
            | E::InsufficientBank { .. }
            | E::Empty(_) => CliError::Config(m),
            _ => CliError::Other(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o: {e}"))
    }
}
