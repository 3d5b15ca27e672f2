//! Experiment runner behind the `ftmsec` binary. Every study returns its
//! files in memory so callers decide where they land.

pub mod config;
pub mod output;
pub mod studies;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use output::{Artifact, RunOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Range,
    Predict,
    Attack,
    Mask,
    Protocol,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Self::Range => "range",
            Self::Predict => "predict",
            Self::Attack => "attack",
            Self::Mask => "mask",
            Self::Protocol => "protocol",
        }
    }
}

/// Validates, then runs `study` on a pool of `jobs` threads.
pub fn run(study: Study, cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match study {
        Study::Range => studies::range(cfg),
        Study::Predict => studies::predict(cfg),
        Study::Attack => studies::attack(cfg),
        Study::Mask => studies::mask(cfg),
        Study::Protocol => studies::protocol(cfg),
    })
}
