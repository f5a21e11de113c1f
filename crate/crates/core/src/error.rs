use thiserror::Error;

/// Errors raised when an operation's input contract is violated.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{experts} experts do not evenly divide {tokens} tokens")]
    Indivisible { tokens: usize, experts: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("expert index {index} out of range for {experts} experts")]
    ExpertOutOfRange { index: usize, experts: usize },
    #[error("assignment is not balanced: expert {expert} has {count} tokens, expected {expected}")]
    Unbalanced {
        expert: usize,
        count: usize,
        expected: usize,
    },
    #[error("duplicate origin (worker {worker}, position {position}) in token batch")]
    DuplicateOrigin { worker: usize, position: usize },
    #[error("instance with {tokens} tokens exceeds the oracle bound of {limit}")]
    TooLarge { tokens: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Strips any stage wrappers and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
