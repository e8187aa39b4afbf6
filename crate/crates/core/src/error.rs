use std::fmt;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Linalg,
    Stft,
    Wav,
    Rank1,
    Scm,
    Em,
    Harness,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Linalg => "linalg",
            Stage::Stft => "stft",
            Stage::Wav => "wav",
            Stage::Rank1 => "rank1",
            Stage::Scm => "scm",
            Stage::Em => "rcscme",
            Stage::Harness => "harness",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{stage}: invalid input: {msg}")]
    InvalidInput { stage: Stage, msg: String },
    #[error("{stage}: numerical failure: {msg}")]
    Numerical { stage: Stage, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(stage: Stage, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            stage,
            msg: msg.into(),
        }
    }

    pub(crate) fn numerical(stage: Stage, msg: impl Into<String>) -> Self {
        Error::Numerical {
            stage,
            msg: msg.into(),
        }
    }

    /// Stage the error came from, if it came from a numerical stage.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::InvalidInput { stage, .. } | Error::Numerical { stage, .. } => Some(*stage),
            Error::Io(_) => None,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }

    /// Re-tag an error with a different stage, keeping its kind.
    pub(crate) fn at(self, stage: Stage) -> Self {
        match self {
            Error::InvalidInput { msg, .. } => Error::InvalidInput { stage, msg },
            Error::Numerical { msg, .. } => Error::Numerical { stage, msg },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
