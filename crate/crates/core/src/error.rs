use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the failure classes surfaced by the public API:
/// shape disagreements, invalid hyperparameters, misuse of the gradient
/// tape, malformed inputs, and numeric-domain violations.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected geometry) disagree in shape.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A hyperparameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The gradient tape is in the wrong state for the requested operation.
    #[error("tape state error: {0}")]
    State(String),

    /// Malformed input data (bad token ids, malformed one-hot, empty set).
    #[error("invalid input: {0}")]
    Input(String),

    /// A value left the numeric domain an operation is defined on.
    #[error("numeric domain error: {0}")]
    Numeric(String),

    /// A run configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
