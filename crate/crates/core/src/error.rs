use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("component {index} = {value} outside [{lo}, {hi}]")]
    Range {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("sequence of length {len} exceeds t_max {max}")]
    Length { len: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Range { .. } => "range",
            Error::Contract(_) => "contract",
            Error::Shape(_) => "shape",
            Error::EmptyInput(_) => "empty_input",
            Error::Length { .. } => "length",
            Error::InvalidInput(_) => "invalid_input",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Eval(_) => "eval",
            Error::Io { .. } => "io",
        }
    }
}
