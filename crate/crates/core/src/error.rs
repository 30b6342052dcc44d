use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented precondition (non-finite number, bad range).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite value at parameter index {index}: {context}")]
    Numeric { index: usize, context: String },

    #[error("sequence format error: {0}")]
    SequenceFormat(String),

    #[error("estimator not initialized: {0}")]
    Uninitialized(String),

    #[error("degenerate density ratio at step {step}{}", trajectory.map(|t| format!(" of trajectory {t}")).unwrap_or_default())]
    DegenerateRatio { step: usize, trajectory: Option<usize> },

    #[error("training failed: {reason}")]
    Training {
        reason: String,
        /// Last parameter vector for which every quantity was finite.
        last_checkpoint: Option<Vec<f64>>,
    },

    #[error("enumeration of {count} trajectories exceeds the oracle guard of {limit}")]
    OracleScale { count: u128, limit: u128 },

    #[error("linear algebra: {0}")]
    LinearAlgebra(String),

    #[error("degenerate bandwidth: {0}")]
    DegenerateBandwidth(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Whether this error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::Index { .. }
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::SequenceFormat(_)
                | Error::DegenerateBandwidth(_)
        )
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what}: non-finite value {} at position {pos}",
            values[pos]
        )));
    }
    Ok(())
}
