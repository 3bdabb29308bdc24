use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid branch schedule: {0}")]
    Schedule(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn numeric(location: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used by the CLI for its exit diagnostic.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Shape { .. } => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Domain(_) => "domain",
            Error::Schedule(_) => "schedule",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}
