//! Experiment driver for orthogonal structural probes: configuration,
//! data loading, resumable training runs, evaluation and analysis reports.

pub mod commands;
pub mod config;
pub mod data;
pub mod runs;
