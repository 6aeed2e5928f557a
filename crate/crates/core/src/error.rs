use thiserror::Error;

use crate::qp::QpStatus;

/// Errors raised by scenario construction, the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("repartition coefficients undefined: every history window sums to zero")]
    UndefinedRepartition,

    #[error("coupling constraints are infeasible together with the agent sets")]
    InfeasibleCoupling,

    #[error("subproblem of agent {agent} ended with status {status:?}")]
    Subproblem { agent: usize, status: QpStatus },

    #[error("qp ended with status {0:?}")]
    Qp(QpStatus),

    #[error("unsupported schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
