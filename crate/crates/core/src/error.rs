use std::path::PathBuf;

/// Errors surfaced by every public operation of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("capability mismatch: {0}")]
    Capability(String),

    #[error("checkpoint error in {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end:
    /// 1 usage, 2 I/O, 3 checkpoint, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Argument(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Image { .. } => 2,
            Error::Checkpoint { .. } | Error::Capability(_) => 3,
            Error::Numeric(_) | Error::Validation { .. } => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_cli_contract() {
        assert_eq!(Error::Argument("x".into()).exit_code(), 1);
        assert_eq!(
            Error::io("a.png", std::io::Error::other("gone")).exit_code(),
            2
        );
        assert_eq!(Error::checkpoint("w.bin", "bad").exit_code(), 3);
        assert_eq!(Error::Numeric("nan".into()).exit_code(), 4);
    }
}
