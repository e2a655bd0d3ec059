use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {tensor}: expected {expected}, got {actual}")]
    Dimension {
        tensor: String,
        expected: String,
        actual: String,
    },
    #[error("{routine} did not converge after {iterations} iterations")]
    Convergence { routine: &'static str, iterations: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("quantity is undefined: {0}")]
    Undefined(String),
    #[error("degenerate range: {0}")]
    Range(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("malformed document: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(tensor: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            tensor: tensor.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
