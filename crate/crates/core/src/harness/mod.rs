//! Monte Carlo experiments: configuration, replication driver and reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{DgpConfig, ExperimentConfig, InferenceMethod, Pipeline, PreWeight};
pub use report::{read_summary, rimse, McReport, RepRecord, SummaryRow};
pub use run::{estimate_on, run_experiment, run_replication, Design};
