//! Experiment driver: configuration, run pipeline and reports.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
