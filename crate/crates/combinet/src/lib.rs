//! File formats, experiment runner and command line for `combinet-core`.

pub mod artifacts;
pub mod cifar;
pub mod cnta;
pub mod config;
pub mod error;
pub mod export;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
