//! Benchmarking toolkit for paired 3D medical image translation.

pub mod bench;
pub mod error;
pub mod genproc;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod patching;
pub mod preprocess;
pub mod server;
mod serde_util;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
