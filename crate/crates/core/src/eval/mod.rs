//! Metrics, data ingestion, the synthetic shift benchmark and experiment runners.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod synth;
