use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] tapfuse_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt file: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: format version {found}, expected {expected}")]
    Version { path: PathBuf, found: String, expected: String },
    #[error("checkpoint does not match the run: {0}")]
    Schema(String),
    #[error("dataset error: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn corrupt(path: &Path, msg: impl ToString) -> Self {
        Error::Corrupt { path: path.to_path_buf(), msg: msg.to_string() }
    }

    /// Process exit code: 1 for anything the user can fix in the config,
    /// 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(tapfuse_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
