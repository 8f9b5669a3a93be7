use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps onto a stable machine-readable code (see [`Error::code`])
/// so the command line front-end can print `error[CODE]: message` lines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown scenario kind `{0}`")]
    UnknownScenario(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {}: {what}", path.display())]
    MissingArtifact { what: String, path: PathBuf },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::Shape(_) => "E_SHAPE",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::UnknownScenario(_) => "E_UNKNOWN_SCENARIO",
            Error::Config(_) => "E_CONFIG",
            Error::MissingArtifact { .. } => "E_MISSING_ARTIFACT",
            Error::HashMismatch { .. } => "E_HASH_MISMATCH",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn format(field: &str, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
