use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unexpected CSV header {found:?}, expected {expected:?}")]
    BadHeader { found: String, expected: String },

    #[error("line {line}: unknown split {token:?}")]
    UnknownSplit { line: usize, token: String },

    #[error("duplicate molecule id {0:?}")]
    DuplicateId(String),

    #[error("molecule {0:?} has an empty SMILES string")]
    EmptySmiles(String),

    #[error("molecule {0:?} is missing a required label")]
    MissingLabel(String),

    #[error("molecule {id:?}: classification label {value} is not 0 or 1")]
    InvalidLabel { id: String, value: f64 },

    #[error("no prediction for molecule {0:?}")]
    MissingPrediction(String),

    #[error("prediction for unknown molecule {0:?}")]
    UnknownPredictionId(String),

    #[error("molecule {id:?} belongs to split {actual}, not {expected}")]
    SplitMismatch {
        id: String,
        expected: String,
        actual: String,
    },

    #[error("duplicate prediction for molecule {0:?}")]
    DuplicatePrediction(String),

    #[error("molecule {id:?}: probability {value} outside [0, 1]")]
    OutOfRangeProbability { id: String, value: f64 },

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("embedder fingerprint mismatch: database built with {database}, configured {configured}")]
    FingerprintMismatch { database: String, configured: String },

    #[error("bad magic bytes in embedding sidecar")]
    BadMagic,

    #[error("entry count mismatch: metadata has {metadata}, sidecar has {sidecar}")]
    CountMismatch { metadata: usize, sidecar: usize },

    #[error("embedding sidecar truncated: expected {expected} bytes, found {found}")]
    TruncatedEmbeddings { expected: usize, found: usize },

    #[error("retrieval pool is empty")]
    EmptyPool,

    #[error("query {0:?} has no description")]
    MissingDescription(String),

    #[error("few-shot prompt needs {expected} examples, got {found}")]
    WrongExampleCount { expected: usize, found: usize },

    #[error("token budget {budget} too small, minimal prompt needs {needed}")]
    BudgetTooSmall { budget: usize, needed: usize },

    #[error("environment variable {0} is not set")]
    MissingKey(String),

    #[error("HTTP transport error: {0}")]
    Transport(String),

    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("malformed response body: {0}")]
    MalformedBody(String),

    #[error("no scripted response for prompt fingerprint {0}")]
    Unscripted(String),

    #[error("molecule {0:?} has no ground truth for the oracle backend")]
    MissingTruth(String),

    #[error("ROC-AUC needs both classes present")]
    DegenerateLabels,

    #[error("metric input is empty")]
    EmptyInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("relative improvement undefined for a zero baseline")]
    ZeroBaseline,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
