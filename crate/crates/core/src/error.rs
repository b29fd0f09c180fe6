use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{}: malformed IDX data at byte offset {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged at round {round} (client {client:?}): {message}")]
    Divergence {
        round: u64,
        client: Option<usize>,
        message: String,
    },

    #[error("global gradient norm {norm_sq:e} is below the dissimilarity threshold")]
    DegeneratePoint { norm_sq: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl FedError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FedError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(FedError::Dimension { expected, found })
        }
    }
}
