use thiserror::Error;

/// Coarse failure category, stable across error variants. The CLI maps these
/// to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// A referenced file/checkpoint/dataset does not exist.
    MissingArtifact,
    /// A config failed validation; the message names the offending field.
    InvalidConfig,
    /// A numeric contract broke at runtime (non-finite value, degenerate input).
    Numeric,
    /// Everything else (shape errors, I/O, bad arguments).
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("invalid config at {field}: {detail}")]
    InvalidConfig { field: String, detail: String },

    #[error("missing artifact: {path}")]
    MissingArtifact { path: String },

    #[error("checkpoint manifest mismatch at {entry}: {detail}")]
    ManifestMismatch { entry: String, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::MissingArtifact { .. } => ErrorCategory::MissingArtifact,
            Error::InvalidConfig { .. } => ErrorCategory::InvalidConfig,
            Error::NonFinite { .. } | Error::Degenerate { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Runtime,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        let path = path.as_ref().display().to_string();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact { path }
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
