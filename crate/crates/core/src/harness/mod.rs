//! Pipelines, run configuration and artifact bookkeeping behind the CLI.

pub mod cli;
pub mod piano;
pub mod stats;
pub mod water;
