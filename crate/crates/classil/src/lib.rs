//! Harness around `classil-core`: experiment configs, dataset loading,
//! canned recipes, the results layout, report rendering and the CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod recipes;
pub mod render;
pub mod results;
pub mod runner;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
