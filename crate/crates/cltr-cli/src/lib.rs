//! Experiment orchestration for the counterfactual LTR toolkit: config
//! parsing, sweep execution over (method, N, run) cells, and CSV reporting.

pub mod config;
pub mod experiment;
pub mod report;
