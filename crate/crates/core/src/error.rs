use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("configuration error ({field_a} vs {field_b}): {message}")]
    Config {
        field_a: String,
        field_b: String,
        message: String,
    },

    #[error("missing prerequisite: {what} not found; run `{stage}` first")]
    MissingPrerequisite { stage: String, what: PathBuf },

    #[error("checkpoint {path} was written under config digest {found}, current config digest is {expected}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("container format: {0}")]
    Container(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(what, expected, got))
    }
}

impl Error {
    /// Process exit status: 2 configuration, 3 missing or stale
    /// prerequisite, 4 anything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::TomlDe(_) | Error::TomlSer(_) => 2,
            Error::MissingPrerequisite { .. } | Error::DigestMismatch { .. } => 3,
            _ => 4,
        }
    }
}
