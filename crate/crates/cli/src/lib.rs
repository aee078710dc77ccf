//! Orchestration for the `crowdkit` binary: configuration, the five
//! subcommands and their run reports.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub use commands::{
    analyse_flows, cmd_flows, cmd_groups, cmd_segment, cmd_simulate, cmd_validate, segment_sequence,
    FlowAnalysis, SegmentRun, SegmentedFrame,
};
pub use config::{
    module_seed, FlowsConfig, Overrides, PipelineConfig, SegmentConfig, SimulateConfig,
    ValidateConfig, DEFAULT_SEED,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Runtime(#[from] crowdkit::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

/// What a command did. Printed to stdout rather than written next to the
/// artifacts, so reruns leave byte-identical output directories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Failed checks; a run with any of these exits nonzero.
    pub failures: Vec<String>,
    pub wall_clock_ms: u128,
}

impl RunReport {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            failures: Vec::new(),
            wall_clock_ms: 0,
        }
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(
            key.to_string(),
            serde_json::to_value(value).expect("metrics serialize"),
        );
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}
