//! Experiment front-end for the flexfed simulator: config ingestion, run
//! orchestration, presets, trace generation and cross-run comparison.

pub mod build;
pub mod compare;
pub mod config;
pub mod presets;
pub mod run;
pub mod traces;
