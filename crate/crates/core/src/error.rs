use thiserror::Error;

/// Errors produced by the feature pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate pose: translation has zero length")]
    DegeneratePose,
    #[error("degenerate epipolar line: point coincides with the epipole")]
    DegenerateLine,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors and FFI status codes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegeneratePose => "degenerate-pose",
            Error::DegenerateLine => "degenerate-line",
            Error::InvalidInput(_) => "invalid-input",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
