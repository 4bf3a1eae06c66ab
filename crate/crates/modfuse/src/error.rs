//! Error type shared across the workspace.
//!
//! Every fallible operation returns [`Error`]; the CLI maps [`Error::category`]
//! to a process exit code so scripted callers can distinguish misuse from
//! numeric blowups.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input values are outside the operation's mathematical domain.
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller broke an API contract (wrong mode, missing modality, bad batch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An argument value is invalid (negative temperature, bad label, bad eps).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration file or field rejected at load time.
    #[error("config error: {0}")]
    Config(String),

    /// A metric has no defined value for the given inputs.
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint or report file is malformed or inconsistent.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    /// Coarse category for process exit codes.
    ///
    /// 2 = caller error (shape/domain/contract/param/config),
    /// 3 = numeric failure, 4 = io/format, 5 = undefined metric,
    /// 6 = data generation failure.
    pub fn category(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::Contract(_)
            | Error::Param(_)
            | Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Format(_) => 4,
            Error::MetricUndefined(_) => 5,
            Error::Generation(_) => 6,
        }
    }
}
