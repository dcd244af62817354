use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: offset {offset}: {msg}", file.display())]
    Parse { file: PathBuf, offset: u64, msg: String },
    #[error("{}: expected {expected} bytes, found {actual}", file.display())]
    Length { file: PathBuf, expected: u64, actual: u64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] faq_core::Error),
}

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use faq_core::Error as C;
        match self {
            Error::Parse { .. } | Error::Length { .. } | Error::Io { .. } => exit::DATA,
            Error::Config(_) | Error::Core(C::Config(_) | C::InvalidArgument(_)) => exit::CONFIG,
            Error::Core(C::Diverged { .. } | C::NanGradient { .. } | C::NonFinite { .. }) => exit::DIVERGED,
            _ => exit::OTHER,
        }
    }
}
