use std::path::{Path, PathBuf};

use thiserror::Error;

/// Exit statuses of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const INCOMPATIBLE: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mrkp_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    /// Bad invocation or unusable input.
    #[error("{0}")]
    Usage(String),
    /// A checkpoint or other artifact that cannot be read by this build.
    #[error("incompatible artifact: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        use mrkp_core::Error as C;
        match self {
            Error::Core(C::Incompatible(_)) | Error::Incompatible(_) => exit::INCOMPATIBLE,
            Error::Core(C::Numeric(_)) => exit::NUMERIC,
            _ => exit::USAGE,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    /// Attaches `path` to line-numbered parse errors from the core crate.
    pub(crate) fn at(path: &Path) -> impl FnOnce(mrkp_core::Error) -> Error + '_ {
        move |e| match e {
            mrkp_core::Error::Parse { line, msg } => Error::Parse { path: path.to_path_buf(), line, msg },
            other => Error::Core(other),
        }
    }
}
