use std::fmt;
use std::path::PathBuf;

/// Where a non-finite value was first observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePoint {
    Step(usize),
    Coordinate(usize),
    Record(usize),
}

impl fmt::Display for FailurePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailurePoint::Step(s) => write!(f, "step {s}"),
            FailurePoint::Coordinate(c) => write!(f, "coordinate {c}"),
            FailurePoint::Record(r) => write!(f, "record {r}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergence is infinite: p > 0 where q = 0 at index {index}")]
    InfiniteDivergence { index: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("unsupported scale: {0}")]
    UnsupportedScale(String),

    #[error("numeric failure: non-finite {what} at {at}")]
    NumericFailure { what: String, at: FailurePoint },

    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(what: impl Into<String>, at: FailurePoint) -> Self {
        Error::NumericFailure {
            what: what.into(),
            at,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
