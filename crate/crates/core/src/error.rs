use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Location of a problem inside a text file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    /// Instance id of the offending record, when the line holds one.
    pub record: Option<u64>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(id) => write!(f, "line {} (record {})", self.line, id),
            None => write!(f, "line {}", self.line),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar node, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node belongs to a different graph")]
    Detached,

    #[error("graph was already differentiated; reset it before a second backward")]
    AlreadyDifferentiated,

    #[error("loss function is not deterministic: {first} then {second}")]
    Nondeterministic { first: f64, second: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("parse error at {at}: {msg}")]
    Parse { at: Location, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(line: usize, record: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Parse {
            at: Location { line, record },
            msg: msg.into(),
        }
    }
}
