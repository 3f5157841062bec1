use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// The variants are grouped by how a caller should react: I/O problems,
/// malformed files, invalid inputs or configuration, and numerical failures.
/// [`Error::exit_code`] maps each group onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic bytes {found:?} (expected \"MGC1\")")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated file (needed {needed} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("{path}: unknown dtype code 0x{code:02x}")]
    UnknownDtype { path: PathBuf, code: u8 },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {name}")]
    NonFinite { name: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::NonFinite { .. } => 3,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::UnknownDtype { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Shape(_) => 2,
        }
    }
}
