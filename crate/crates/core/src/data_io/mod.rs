//! Feature files, dataset manifests, splits and the synthetic generator.

mod features;
mod manifest;
mod probe;
mod split;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use features::{decode_features, encode_features, read_features, truncate, write_features, FeatureSequence, MAGIC, VERSION};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use probe::{mean_pool, LinearProbe};
pub use split::{split_indices, SplitIndices, SplitSpec, MIN_ENTRIES};
pub use synth::{generate, synth_dataset, SynthConfig, SynthDataset, MANIFEST_NAME};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("need at least {need} entries, got {got}")]
    TooFewEntries { need: usize, got: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid synthetic config: {0}")]
    Synth(String),
    #[error("linear probe failed: {0}")]
    Probe(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
