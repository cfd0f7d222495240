use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FsanError>;

#[derive(Debug, Error)]
pub enum FsanError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {}{}: {reason}", .path.display(), location(*.line, *.offset))]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        offset: Option<u64>,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(line: Option<usize>, offset: Option<u64>) -> String {
    match (line, offset) {
        (Some(l), _) => format!(" (line {l})"),
        (None, Some(o)) => format!(" (byte offset {o})"),
        (None, None) => String::new(),
    }
}

impl FsanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FsanError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures the CLI reports with the numerical exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FsanError::Numerical(_))
    }
}
