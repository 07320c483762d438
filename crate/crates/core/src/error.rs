use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank deficient: requested rank {requested}, usable rank {usable}")]
    RankDeficient { requested: usize, usable: usize },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("{what}: parse error at byte offset {offset}: {message}")]
    Parse {
        what: &'static str,
        offset: u64,
        message: String,
    },

    #[error("{what}: unsupported version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{file}: row {row}, column {column}: {message}")]
    Table {
        file: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
