use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range for table with {rows} rows")]
    Index { id: usize, rows: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: missing or non-string field `{field}`")]
    Schema { line: usize, field: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{}: {source}", path.display())]
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

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Schema { .. } | Error::Data(_) => 3,
            Error::Format { .. } => 4,
            _ => 1,
        }
    }
}
