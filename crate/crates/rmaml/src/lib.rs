//! File formats, experiment configuration and the command-line driver for
//! `rmaml-core`.

pub mod bytes;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_file;
pub mod error;
pub mod exec;
pub mod iam_dump;
pub mod report;

pub use error::{Result, RunError};
