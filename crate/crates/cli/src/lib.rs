//! File formats, network clients and the command-line pipeline around
//! `crowdgraph-core`: dataset generation, training, sampling, evaluation,
//! ablation and export.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod embed;
pub mod error;
pub mod export;
pub mod io;
pub mod llm;

pub use error::{CliError, Result};
