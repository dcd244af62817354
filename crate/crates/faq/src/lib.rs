//! IO, file formats, experiment recipes and the command line for `faq-core`.

use std::path::PathBuf;

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod intfile;
pub mod reports;

pub use error::{Error, Result};

/// MNIST location: `$FAQ_MNIST_DIR`, else `data/mnist` under the workspace.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("FAQ_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
