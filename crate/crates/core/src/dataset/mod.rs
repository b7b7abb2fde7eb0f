//! Corpus ingestion, stratified splitting and synthetic corpus generation.

mod clip;
mod manifest;
mod split;
mod synth;

pub use clip::{fit_length, load_clip, target_len, write_wav, AudioClip};
pub use manifest::{load_manifest, DurationMismatch, Manifest, ManifestEntry, ManifestOptions};
pub use split::{allocate_test_counts, kfold, stratified_split, SplitPlan};
pub use synth::{synth_corpus, SignalKind, SynthClass, SynthConfig};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("manifest row {row}: unknown label {label:?}")]
    UnknownLabel { row: usize, label: String },
    #[error("unreadable WAV {path}: {reason}")]
    UnreadableWav { path: PathBuf, reason: String },
    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("class {class} has {count} samples, needs at least {needed}")]
    TooFewSamples { class: String, count: usize, needed: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
