use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("softmax slice {slice} has every entry masked")]
    AllMasked { slice: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Short stable tag for machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::AllMasked { .. } => "all_masked",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::VersionMismatch { .. } => "io_version",
            Error::Truncated(_) => "io_truncated",
            Error::ShapeMismatch { .. } => "io_shape",
            Error::Format(_) => "io_format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
