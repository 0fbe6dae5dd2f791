//! Experiment orchestration for the pharos robustness toolkit: config
//! loading, the artifact pipeline behind each `pharos` subcommand, and the
//! aggregated comparison report.

pub mod config;
pub mod pipeline;
