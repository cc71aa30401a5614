use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the public
/// operations can report: shape problems, bad indices, violated call
/// contracts, numerical blow-ups, and file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: dimension mismatch: {details}")]
    Dim {
        primitive: &'static str,
        details: String,
    },

    #[error("index {index} out of range ({limit} rows)")]
    Index { index: usize, limit: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn dim(primitive: &'static str, details: impl Into<String>) -> Self {
        Error::Dim {
            primitive,
            details: details.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
