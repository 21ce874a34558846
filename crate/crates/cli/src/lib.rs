//! Pipeline orchestration behind the `vdd` binary.
//!
//! Each stage mirrors one core module; [`pipeline::run_pipeline`] chains them
//! from a [`config::RunConfig`].

use std::fmt::Display;

use thiserror::Error;

pub mod config;
pub mod inspect;
pub mod pipeline;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(stage: &'static str, e: impl Display) -> Self {
        CliError::Stage { stage, message: e.to_string() }
    }
}

/// Tags any error with the stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::stage(stage, e))
    }
}
