//! Experiment harness for the Q-score matching laboratory: configuration
//! files, seeded multi-run execution, CSV metric logs, run comparison and the
//! reproduction presets behind the `qsm-lab` binary.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod presets;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl From<qsm_core::Error> for HarnessError {
    fn from(e: qsm_core::Error) -> Self {
        Self::Run(e.to_string())
    }
}
