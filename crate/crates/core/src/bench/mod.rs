//! Workload runner, optimization ladder and report emission.

mod config;
mod manifest;
mod report;
mod runner;

pub use config::{HarnessConfig, ENV_PREFIX};
pub use manifest::{ManifestRecord, WorkloadManifest};
pub use report::{format_delta, ladder_markdown, toggle_map, Aggregates, BenchReport, Failure, RequestRow, Summary};
pub use runner::{
    load_vocab, run_ladder, run_workload, run_workload_with_spans, BackEnd, BackOutput, FrontEnd, FrontOutput,
    StageFailure,
};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl BenchError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Data(_) => 3,
        }
    }
}
