//! File formats, dataset generation, training driver and command-line
//! plumbing around `evsr-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod par;
pub mod samples;
pub mod trainer;

pub use error::{Error, Result};
