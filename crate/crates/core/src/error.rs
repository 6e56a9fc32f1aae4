use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status: 2 for configuration problems, 3 for bad data,
    /// shapes or files, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Numerics(_) | Error::State(_) | Error::MetricUndefined(_) => 1,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
