//! Crate-wide error type.

/// Error type covering every failure mode in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A forward value, gradient, or loss became NaN or infinite.
    /// Non-finite numbers are a hard error everywhere in this crate.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Token id or tensor index out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// An operation was called outside its contract (wrong rank, empty
    /// response, unrecorded graph, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A hyperparameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Empty or inconsistent data set.
    #[error("data error: {0}")]
    Data(String),
    /// Bad or missing configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Schedule state used before it was initialized.
    #[error("schedule state error: {0}")]
    State(String),
    /// Enumeration request exceeds the oracle budget.
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    /// Sequence does not fit within the model context.
    #[error("sequence too long: {0}")]
    Length(String),
    /// Malformed checkpoint or dataset bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
