use thiserror::Error;

/// Errors from the numeric model core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid model structure: {0}")]
    Structure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Errors from aggregation and round bookkeeping.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FedError {
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("updates span rounds {0} and {1}")]
    RoundMismatch(u64, u64),
    #[error("schema mismatch for client {client_id}: {detail}")]
    Schema { client_id: String, detail: String },
    #[error("duplicate update from client {0}")]
    Duplicate(String),
    #[error("update for round {submitted} but round {current} is open")]
    StaleRound { current: u64, submitted: u64 },
    #[error("round {0} is not open")]
    Closed(u64),
    #[error("sample count must be positive (client {0})")]
    ZeroSamples(String),
    #[error("quorum not reached: {received} of {required} updates after timeout")]
    QuorumFailure { received: usize, required: usize },
    #[error("invalid federation config: {0}")]
    Config(String),
}

/// Errors from the JSON/base64 wire codecs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid base64 in tensor {0:?}")]
    Base64(String),
    #[error("tensor {name:?}: payload has {actual} bytes, shape needs {expected}")]
    ByteLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {0:?} holds a non-finite value")]
    NonFinite(String),
    #[error("invalid message: {0}")]
    Invalid(String),
}

/// Errors from frame handling and the vision pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisionError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Errors from VOC annotation parsing; `element` names the offending element.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("annotation error in <{element}>: {message}")]
pub struct VocError {
    pub element: String,
    pub message: String,
}

impl VocError {
    pub(crate) fn new(element: &str, message: impl Into<String>) -> Self {
        Self {
            element: element.to_string(),
            message: message.into(),
        }
    }
}
