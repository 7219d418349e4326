//! File formats, dataset directories and run reports for `gsdepth-core`.
//!
//! Readers reject malformed input instead of guessing; every error names the
//! offending file.

pub mod colmap;
pub mod config;
pub mod dataset;
mod error;
pub mod pfm;
pub mod ply;
pub mod png;
pub mod report;

pub use error::{Error, Result};
pub use gsdepth_core;
