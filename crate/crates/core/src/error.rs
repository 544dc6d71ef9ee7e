use thiserror::Error;

/// Broad class of a failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: schema, parse, contract violations in the data.
    Data,
    /// The numerics broke down (undefined estimates, empty integration domain, ...).
    Numerical,
    /// Invalid configuration values.
    Config,
    Io,
}

#[derive(Debug, Error)]
pub enum HteError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot read `{value}`")]
    Parse { row: usize, column: String, value: String },

    #[error("data error at row {row}: {message}")]
    DataRow { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("exposure cell (pi={pi}, t={treated}) has no units")]
    EmptyCell { pi: f64, treated: u8 },

    #[error("estimate undefined at x={x:?}, pi={pi}: zero propensity in arm t={treated}")]
    UndefinedPoint { x: Vec<f64>, pi: f64, treated: u8 },

    #[error("no usable grid points for {what}")]
    EmptyDomain { what: String },

    #[error("non-positive variance radicand {value:e} ({context})")]
    NonPositiveRadicand { value: f64, context: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HteError {
    pub fn class(&self) -> ErrorClass {
        use HteError::*;
        match self {
            Schema(_) | Parse { .. } | DataRow { .. } | Data(_) | EmptyCell { .. } => ErrorClass::Data,
            UndefinedPoint { .. } | EmptyDomain { .. } | NonPositiveRadicand { .. } | Domain(_) | Numerical(_) => {
                ErrorClass::Numerical
            }
            Config(_) => ErrorClass::Config,
            Io(_) => ErrorClass::Io,
            Csv(e) => {
                if e.is_io_error() {
                    ErrorClass::Io
                } else {
                    ErrorClass::Data
                }
            }
        }
    }
}

pub type Result<T, E = HteError> = std::result::Result<T, E>;
