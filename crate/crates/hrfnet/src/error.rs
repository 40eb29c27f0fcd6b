//! Crate-wide error type.

/// Errors surfaced by the public API.
///
/// Variants are grouped by failure category so callers (notably the CLI)
/// can map them onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions violate an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input has the wrong number of channels.
    #[error("channel error: expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A scalar argument is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A forgery region could not be placed inside the image bounds.
    #[error("placement error: {0}")]
    Placement(String),

    /// Dataset or manifest problem (missing files, bad splits, empty input).
    #[error("data error: {0}")]
    Data(String),

    /// AUC is undefined for the given labels (single-class input).
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    /// A numeric failure such as a non-finite training loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable exit-code category: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
