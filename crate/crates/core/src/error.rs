use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),

    #[error("invalid record `{record_id}`: {message}")]
    InvalidRecord { record_id: String, message: String },

    #[error("unknown section `{0}`")]
    UnknownSection(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown code `{0}`")]
    UnknownCode(String),

    #[error("invalid terminology: {0}")]
    Terminology(String),

    #[error("inactive-code mapping cycle: {}", .0.join(" -> "))]
    MappingCycle(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: {left} targets vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateRecord(_) => "duplicate_record",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::UnknownSection(_) => "unknown_section",
            Error::Config(_) => "config",
            Error::UnknownCode(_) => "unknown_code",
            Error::Terminology(_) => "terminology",
            Error::MappingCycle(_) => "mapping_cycle",
            Error::Shape(_) => "shape",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::TooFewValues { .. } => "too_few_values",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
