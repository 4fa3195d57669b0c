//! Metrics, synthetic lakes and the end-to-end benchmark runner.

pub mod benchmark;
pub mod metrics;
pub mod synthetic;
