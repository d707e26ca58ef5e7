use gradgraph::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ApenError>;

impl From<GraphError> for ApenError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidArgument(m) => ApenError::InvalidArgument(m),
            GraphError::NumericFailure(m) => ApenError::NumericFailure(m),
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ApenError::InvalidArgument(msg.into()))
}

pub(crate) fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(ApenError::Parse {
        line,
        message: msg.into(),
    })
}
