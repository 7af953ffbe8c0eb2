//! Experiment harness for the stochastic batch augmentation lab: flat-file
//! configs, seeded sweeps, line-delimited metrics, summaries, cost ratios,
//! and curve emission. The `sba` binary is a thin wrapper over these
//! modules.

pub mod config;
pub mod metrics;
pub mod runner;
