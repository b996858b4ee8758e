use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("document {0} has no image feature but multimodal composition was requested")]
    MissingImageFeature(String),

    #[error("need at least {needed} training pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },

    #[error("k = {k} exceeds the number of points ({points})")]
    TooFewPoints { k: usize, points: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected \"FLMR\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unexpected section kind {found} (expected {expected})")]
    SectionKind { found: u32, expected: u32 },

    #[error("truncated at byte {0}")]
    Truncated(usize),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
