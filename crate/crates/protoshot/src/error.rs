use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("duplicate source_id: {0}")]
    DuplicateSourceId(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest error ({path}, row {row}): {msg}")]
    Manifest {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown source_id: {0}")]
    UnknownSourceId(String),

    #[error("embedder is frozen")]
    Frozen,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("file format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
