use std::path::{Path, PathBuf};

pub type Result<T, E = AsrError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AsrError {
    #[error(transparent)]
    Core(#[from] nue_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio format in {}: {reason}", path.display())]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("corrupt audio file {}: {reason}", path.display())]
    CorruptAudio { path: PathBuf, reason: String },
    #[error("{}:{line}: {reason}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("config: {0}")]
    Config(String),
}

/// Attaches a path to I/O errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| AsrError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
