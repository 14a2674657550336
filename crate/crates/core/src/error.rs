use std::path::PathBuf;

use crate::nmpc::NmpcSolution;
use crate::qp::QpStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("QP solve failed with status {status:?} (kkt residual {kkt_residual:.3e})")]
    Qp { status: QpStatus, kkt_residual: f64 },

    #[error(
        "SQP did not converge after {iterations} iterations \
         (step {step_norm:.3e}, defect {eq_residual:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        step_norm: f64,
        eq_residual: f64,
        best: Box<NmpcSolution>,
    },

    #[error("training data too short: {samples} samples for window {window}")]
    DatasetTooShort { samples: usize, window: usize },

    #[error("regressor matrix is rank deficient: column {column} of {columns} is dependent")]
    RankDeficient { column: usize, columns: usize },

    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what} in {path}: {reason}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
