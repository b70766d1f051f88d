use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters after the last epoch that finished with finite values.
        last_good: Box<crate::autodiff::ParameterStore>,
    },

    #[error("backward already ran on this tape; build a new tape")]
    BackwardTwice,

    #[error("triangle fixing did not converge after {sweeps} sweeps (last delta {delta:e})")]
    NotConverged {
        sweeps: usize,
        delta: f64,
        /// Best-so-far corrected matrix, row-major.
        best: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::NotConverged { .. } | Error::Diverged { .. } | Error::BackwardTwice
        )
    }
}
