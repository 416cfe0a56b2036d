//! Scenario engine: runs the sensors, channel, supervisor and robot
//! together and records what happened.

pub mod checks;
pub mod lockstep;
pub mod metrics;
pub mod realtime;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod svg;

use std::path::PathBuf;

use thiserror::Error;

use crate::ciot::{CiotError, ServerError};

pub use checks::{check_run, BoundCheck};
pub use lockstep::run_lockstep;
pub use metrics::{RunMetrics, RunSummary};
pub use realtime::{run_realtime, RealtimeOptions};
pub use replay::{replay, ReplayError, ReplayReport};
pub use report::emit_report;
pub use scenario::{RunPlan, ScenarioError, ScenarioSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("channel error: {0}")]
    Channel(#[from] CiotError),
    #[error("broker: {0}")]
    Server(#[from] ServerError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Problems with the input rather than the run.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Scenario(_))
    }
}
