use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no instances in {0}")]
    NoInstances(PathBuf),

    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),

    #[error("instance {id:?} has embedding dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("instance {id:?} has gold label {label} outside 1..={num_classes}")]
    LabelOutOfRange {
        id: String,
        label: i64,
        num_classes: usize,
    },

    #[error("instance {id:?} in split {split} has no gold label")]
    MissingGoldLabel { id: String, split: String },

    #[error("unknown instance id {0:?}")]
    UnknownId(String),

    #[error("unknown feature kind {0:?}")]
    UnknownKind(String),

    #[error("prompt atom {0:?} names an undeclared template")]
    UndeclaredTemplate(String),

    #[error("invalid template {name:?}: {message}")]
    InvalidTemplate { name: String, message: String },

    #[error("invalid rule: {0}")]
    InvalidRule(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("cannot train student: {0}")]
    Training(String),

    #[error("clustering needs at least 2 instances, got {0}")]
    TooFewInstances(usize),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("unknown query {0:?}")]
    UnknownQuery(String),

    #[error("query {0:?} was already answered differently")]
    AlreadyAnswered(String),

    #[error("query {query_id:?} expects {expected}")]
    AnswerMismatch { query_id: String, expected: String },

    #[error("session terminated: {0}")]
    Terminated(String),

    #[error("model file: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
