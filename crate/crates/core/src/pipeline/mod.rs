//! Datasets, metrics, synthetic corpora and end-to-end experiments.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod repl;
