use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: axis `{axis}` expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("empty attention row {row}: every key is masked")]
    EmptyAttentionRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported rate {got}, expected 16000")]
    UnsupportedRate { got: u32 },

    #[error("audio format error: {0}")]
    AudioFormat(String),

    #[error("audio too short: {samples} samples, need at least {min}")]
    AudioTooShort { samples: usize, min: usize },

    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty reference transcript")]
    EmptyReference,

    #[error("empty manifest")]
    EmptyManifest,

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("weights file error: {0}")]
    Weights(String),

    #[error("memory budget {budget} bytes is below the {needed} bytes needed for one second")]
    BudgetTooSmall { budget: u64, needed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 input, 3 config, 4 weights, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnsupportedRate { .. }
            | Error::AudioFormat(_)
            | Error::AudioTooShort { .. }
            | Error::InputTooShort { .. }
            | Error::Input(_)
            | Error::EmptyReference
            | Error::EmptyManifest
            | Error::Manifest { .. }
            | Error::Io { .. } => 2,
            Error::Config(_) | Error::BudgetTooSmall { .. } => 3,
            Error::Weights(_) => 4,
            Error::Dimension { .. }
            | Error::NumericDomain { .. }
            | Error::EmptyAttentionRow { .. }
            | Error::Internal(_) => 5,
        }
    }
}
