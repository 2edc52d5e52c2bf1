use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GdaipError>;

#[derive(Debug, Error)]
pub enum GdaipError {
    /// Malformed or inconsistent caller input (bad sizes, ranges, counts).
    #[error("input error: {0}")]
    Input(String),

    /// Mesh or graph structure that violates its invariants.
    #[error("structural error: {0}")]
    Structural(String),

    /// Operand shapes that cannot be combined.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dimensions or settings that disagree across artifacts.
    #[error("config error: {0}")]
    Config(String),

    #[error("size guard exceeded: {0}")]
    Size(String),

    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GdaipError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GdaipError::Divergence { .. } => 3,
            GdaipError::Io { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdaipError::Io {
            path: path.into(),
            source,
        }
    }
}
