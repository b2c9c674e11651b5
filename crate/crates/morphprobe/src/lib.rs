//! File formats, experiment configuration and pipeline orchestration for
//! multilabel morphosyntactic probing. The algorithms live in
//! `morphprobe-core`; this crate adds disk I/O, parallel cell execution and
//! the `morphprobe` command line.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod format;
pub mod pipeline;
pub mod report;

pub use config::{Experiment, ExperimentConfig};
pub use error::{Error, Result};
pub use pipeline::{Options, Pipeline};
