use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a recorded forward pass")]
    NoTape,

    #[error("graph: {0}")]
    Graph(String),

    #[error("format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("bad magic in {what}: expected 0x{expected:08x}, found 0x{found:08x}")]
    BadMagic { what: String, expected: u32, found: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: String, expected: usize, actual: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Data(_)
            | Error::Io(_)
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::Format(_)
            | Error::UnsupportedVersion { .. }
            | Error::MissingArtifact(_) => 3,
            Error::NonFinite { .. } | Error::Degenerate(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
