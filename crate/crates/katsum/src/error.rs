//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset {path}, line {line}: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id '{id}'")]
    DuplicateDocId { id: String },

    #[error("empty corpus: no documents to build a vocabulary from")]
    EmptyCorpus,

    #[error("{path}, line {line}: {reason}")]
    Tsv {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} '{name}'")]
    UnknownPhrase { kind: &'static str, name: String },

    #[error("no valid corruption exists for triple ({h}, {r}, {t}): every candidate is present in the graph")]
    NoCorruption { h: String, r: String, t: String },

    #[error("classifier training data contains a single class; both labels are required")]
    SingleClass,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("zero vector has no direction; cosine similarity is undefined")]
    ZeroVector,

    #[error("learning-rate schedule is undefined at step 0")]
    ScheduleStepZero,

    #[error("non-finite loss at optimizer step {step}; diagnostic checkpoint written to {checkpoint}")]
    NonFiniteLoss { step: u64, checkpoint: PathBuf },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("config {path}, line {line}: {reason}")]
    Config {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing artifact '{artifact}': run the '{stage}' stage first")]
    MissingPrerequisite { artifact: String, stage: String },

    #[error("artifacts directory is locked by another run ({lock}); remove the lock file if no other run is active")]
    Locked { lock: PathBuf },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
