use std::path::PathBuf;

use crate::ratio::Variant;

/// Errors raised by the correction math, the acquisition protocols and the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameter vectors of different shapes were combined.
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// A variant needed a training-side reference log-probability that was not acquired.
    #[error("variant {variant} requires a reference log-probability missing for rollout version {version}")]
    MissingOldLogit { variant: Variant, version: u64 },

    /// The snapshot for a rollout version was evicted before its old logits were recovered.
    #[error("snapshot for version {version} is no longer resident")]
    SnapshotEvicted { version: u64 },

    /// An acquisition or pipeline protocol step was invoked out of order.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The arithmetic-interpolation clip constraint has no finite boundary.
    #[error("singular clip bound: (1 - alpha) * (1 + eps) = {product} >= 1")]
    SingularBound { product: f64 },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A persisted container failed its integrity check.
    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        what: String,
        stored: u32,
        computed: u32,
    },

    /// A persisted file could not be decoded.
    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by invalid user configuration rather than run-time failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::TomlDe(_) | Error::Domain(_) | Error::SingularBound { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
