use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant. `field` names the key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Inputs to an operation do not satisfy its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Action or observation counts disagree with the environment.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    /// A fixed-architecture network was fed an input of the wrong size.
    #[error("architecture rigidity: network built for input dimension {expected} (I = {built_for}), got {got}")]
    ArchitectureRigidity {
        expected: usize,
        got: usize,
        built_for: usize,
    },

    /// Exhaustive enumeration would exceed the configured budget.
    #[error("enumeration size {requested} exceeds the limit {limit}")]
    Size { requested: String, limit: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },

    #[error("config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
