use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

impl Error {
    /// Process exit status for the command-line tool: 1 usage, 2 config,
    /// 3 data, 4 numeric or runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::OutOfRange { .. } | Error::Shape { .. } => 3,
            Error::NonFinite(_) | Error::Protocol(_) | Error::GradCheck(_) => 4,
        }
    }
}
