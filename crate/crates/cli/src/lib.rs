//! Pipeline library behind the `prodfn` binary: configuration schema,
//! stage orchestration, artifact manifest, and report rendering. Kept as
//! a library so integration tests can run pipelines in-process.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{
    DataConfig, EventStudyConfig, LaborTestConfig, OutcomeVar, RunConfig, SimulatorConfig, Stages,
};
pub use pipeline::{report_only, run, Manifest};
