use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimensions {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("no motion")]
    NoMotion,

    #[error("no dominant flows")]
    NoDominantFlows,

    #[error("need at least two pedestrians")]
    TooFewPedestrians,

    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}

pub(crate) fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimensions { expected, got })
    }
}
