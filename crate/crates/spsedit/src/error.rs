use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("not an SPSE container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends inside an entry")]
    Truncated,
    #[error("{0} bytes after the last entry")]
    TrailingBytes(usize),
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("entry {0:?} has an impossible shape")]
    BadShape(String),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("malformed image: {0}")]
    Image(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] spsedit_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    /// Short machine-readable category for the error line printed on exit.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => "missing_file",
            Error::Io { .. } => "io",
            Error::Format { source: FormatError::UnsupportedVersion(_), .. } => "version_mismatch",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::Usage(_) => "usage",
            Error::Core(_) => "run",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
