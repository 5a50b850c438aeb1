//! Experiment orchestration for the desk-scale RAE/REPA pipeline: run
//! configuration, resumable training runs, ablation drivers, CSV and plot
//! output.

pub mod config;
pub mod experiments;
pub mod io;
pub mod pipeline;
pub mod plot;

pub use config::RunConfig;
