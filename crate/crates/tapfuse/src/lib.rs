//! File formats, datasets, pipeline stages and the command line around
//! `tapfuse-core`.

pub use tapfuse_core as core;

pub mod config;
pub mod datasets;
pub mod error;
pub mod pipeline;
pub mod tensorfile;
pub mod viz;

pub use error::{Error, Result};
