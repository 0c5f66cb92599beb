use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("mode index {mode} out of range for order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("partial contraction in mode {mode} vanished")]
    ZeroContraction { mode: usize },

    #[error("bad start: {0}")]
    BadStart(String),

    #[error("degenerate block in mode {mode}: {reason}")]
    DegenerateBlock { mode: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("run not converged: terminal gradient norm {grad_norm:e} above {tol:e}")]
    NotConverged { grad_norm: f64, tol: f64 },

    #[error("bad tensor: {0}")]
    BadTensor(String),

    #[error("grid oracle supports mode sizes up to 3, got {0:?}")]
    DimsTooLarge(Vec<usize>),

    #[error("expected a 2-way tensor, got order {0}")]
    NotMatrix(usize),

    #[error("audit violation: {0}")]
    AuditViolation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("trace schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
