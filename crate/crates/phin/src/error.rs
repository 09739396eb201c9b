use std::path::{Path, PathBuf};

/// Errors of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Core(#[from] phin_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    /// Attaches the offending file to the message.
    pub fn in_file(self, path: &Path) -> Self {
        Error::InFile { path: path.to_path_buf(), source: Box::new(self) }
    }

    /// 2 for configuration problems, 3 for data and I/O problems, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        use phin_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::InFile { source, .. } => source.exit_code(),
            Error::Core(C::Numerical(_)) => 4,
            Error::Core(C::Format(_)) => 3,
            Error::Core(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
