//! Experiment harness for `hyperproto`: run configuration, dataset files,
//! CSV reports, matrix exports and the `hyperproto` command-line tool.

pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod io;
pub mod report;
pub mod run;
pub mod stats;

pub use config::{DataSpec, EncoderSpec, ExportSpec, RunConfig};
pub use error::{HarnessError, Result};
