use thiserror::Error;

/// Everything that can go wrong inside the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} s is outside the timeline extent [0, {end}] s")]
    OutOfRange { t: f64, end: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("synchronization failed: {0}")]
    SynchronizationFailed(String),

    #[error("incomplete training data: {0}")]
    IncompleteTraining(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("scenario error at `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn scenario(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
