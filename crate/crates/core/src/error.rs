use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A weight, token or JSON file does not follow its declared layout.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Operand or tensor shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Token ids or vocabularies disagree between two inputs.
    #[error("vocab error: {0}")]
    Vocab(String),

    /// Non-finite input where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A requested prune ratio cannot be met by MLP neurons alone.
    #[error("infeasible ratio: {0}")]
    Infeasible(String),

    /// Argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Io { .. } | Error::InvalidArgument(_) => 2,
            Error::Shape(_) | Error::Vocab(_) | Error::Numeric(_) => 3,
            Error::Infeasible(_) => 4,
        }
    }
}
