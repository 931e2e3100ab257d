//! Config-driven experiment runner for `pathvar`.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Resolved};
pub use runner::{render, run, RunReport};
