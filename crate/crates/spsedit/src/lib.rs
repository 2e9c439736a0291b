//! File formats and the command-line front end for `spsedit-core`.

pub mod cli;
pub mod config;
pub mod container;
mod error;
pub mod image;
pub mod report;

pub use error::{Error, FormatError, Result};
