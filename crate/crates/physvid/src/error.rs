//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an op; names both operands.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-operand dimension problem (empty axis, length mismatch, ...).
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// Invalid configuration (bad field values, mode/flag conflicts).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid runtime input (out-of-range argument, bad token id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Object used in a state that forbids the operation (e.g. reused tape).
    #[error("state error: {0}")]
    State(String),

    /// Checked-mode numerics: an op produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Training or sampling aborted on a numerical failure.
    #[error("numerical abort at step {step}: {msg}")]
    NumericalAbort { step: usize, msg: String },

    /// Annotation pipeline failure after exhausting retries. Carries every
    /// raw response seen so the caller can inspect what the endpoint said.
    #[error("annotation error: {msg} ({} raw responses kept)", responses.len())]
    Annotation {
        msg: String,
        responses: Vec<String>,
    },

    /// Transport-level endpoint failure; retryable.
    #[error("endpoint transport error: {0}")]
    Transport(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn annotation(msg: impl Into<String>, responses: Vec<String>) -> Self {
        Error::Annotation {
            msg: msg.into(),
            responses,
        }
    }

    /// Process exit code for the CLI: 0 ok, 2 config, 3 I/O, 4 numerical
    /// abort, 5 annotation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Input(_)
            | Error::Contract(_)
            | Error::State(_)
            | Error::ShapeMismatch { .. }
            | Error::Dimension { .. } => 2,
            Error::Io(_) | Error::Json(_) | Error::Transport(_) => 3,
            Error::NonFinite { .. } | Error::NumericalAbort { .. } => 4,
            Error::Annotation { .. } => 5,
        }
    }
}
