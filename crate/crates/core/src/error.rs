use std::fmt;

/// Error type shared across the workspace.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or matrix shapes do not line up.
    Dimension(String),
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Non-finite values reached a numeric routine.
    Numeric(String),
    /// A request would exceed a hard resource bound.
    Capacity(String),
    /// A data file failed to parse; carries the 1-based line number when known.
    Parse { line: Option<usize>, message: String },
    /// A record parsed but violates the file schema.
    Schema(String),
    /// Underlying I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Capacity(m) => write!(f, "capacity error: {m}"),
            Error::Parse { line: Some(n), message } => write!(f, "parse error at line {n}: {message}"),
            Error::Parse { line: None, message } => write!(f, "parse error: {message}"),
            Error::Schema(m) => write!(f, "schema error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn numeric_err(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
