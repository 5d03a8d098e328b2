use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while decoding a tensor file body.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorFormatError {
    #[error("bad magic {found:?}, expected \"STDT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (expected 1)")]
    VersionMismatch { found: u32 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header: need {expected} bytes, found {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("trailing bytes after payload: expected {expected} payload bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<u64>,
        reason: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorFormatError,
    },
    #[error(transparent)]
    Format(#[from] TensorFormatError),
    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("utterance {id:?}: referenced file {} does not exist", path.display())]
    MissingFile { id: String, path: PathBuf },
    #[error("utterance {id:?}: {what} has {actual} frames, expected {expected}")]
    FrameMismatch {
        id: String,
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("utterance {id:?}: {msg}")]
    Manifest { id: String, msg: String },
    #[error("utterance {id:?}: intervals {first:?} and {second:?} overlap")]
    Overlap {
        id: String,
        first: (String, f64, f64),
        second: (String, f64, f64),
    },
    #[error(
        "utterance {id:?}: interval {label:?} ends at {offset_s} s, beyond duration {duration_s} s"
    )]
    BeyondDuration {
        id: String,
        label: String,
        offset_s: f64,
        duration_s: f64,
    },
    #[error("utterance {id:?}: invalid interval {label:?} [{onset_s}, {offset_s})")]
    InvalidInterval {
        id: String,
        label: String,
        onset_s: f64,
        offset_s: f64,
    },
    #[error("manifests and alignments share no utterance ids")]
    EmptyJoin,
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("utterance {id:?}: no phone alignment")]
    MissingPhones { id: String },
    #[error("class file line {line}: {msg}")]
    ClassFile { line: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in input vector {index}")]
    NonFinite { index: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
