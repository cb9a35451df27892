//! Benchmark harness: toy landscape, datasets, configs, run records and
//! reports.

pub mod config;
pub mod datasets;
pub mod record;
pub mod report;
pub mod runner;
pub mod toy;
