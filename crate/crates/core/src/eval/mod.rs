//! Toy data, evaluation metrics and the throughput benchmark engine.

pub mod metrics;
pub mod throughput;
pub mod toy;
