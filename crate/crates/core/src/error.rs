use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum DfnError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The OS error is the source; `{:#}` chains print it after the path.
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("quaternion for joint {joint} has near-zero norm {norm:e}")]
    DegenerateQuaternion { joint: usize, norm: f64 },

    #[error("degenerate facing direction at frame {frame}")]
    DegenerateFacing { frame: usize },

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl DfnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        DfnError::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DfnError::NonFinite { .. } | DfnError::DegenerateQuaternion { .. } | DfnError::DegenerateFacing { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, DfnError::Io { .. } | DfnError::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, DfnError>;
