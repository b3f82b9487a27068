//! Files, formats and the command-line front end around [`hdrface_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod jpeg;
pub mod manifest;
pub mod metrics;
pub mod run;

pub use hdrface_core as core;
pub use error::{HdrError, Result};
