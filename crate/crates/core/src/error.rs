use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: corrupt data at byte {offset}: {msg}", path.display())]
    Corrupt {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at episode {episode} (loss is not finite)")]
    Divergence { episode: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
