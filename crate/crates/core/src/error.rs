//! Error taxonomy shared across the crate.
//!
//! The variants map onto the CLI exit codes: data problems (bad files,
//! invariant violations) exit 1, configuration/usage problems exit 2,
//! numerical failures exit 3.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at row {row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model fit did not converge after {iterations} iterations (grad norm {grad_norm:.3e}, step norm {step_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        step_norm: f64,
    },

    #[error(
        "interval infeasible: raise f_b (risk {risk:.4} at f_b = {f_b} exceeds gamma = {gamma})"
    )]
    InfeasibleInterval { f_b: f64, risk: f64, gamma: f64 },

    #[error(
        "step aborted: {failed} of {total} replications failed to fit (>= 5% guard): {first_cause}"
    )]
    TooManyFitFailures {
        failed: usize,
        total: usize,
        first_cause: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class used by the CLI: 1 data, 2 usage, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) => 1,
            Error::Config(_) => 2,
            Error::Numerical(_)
            | Error::NonConvergence { .. }
            | Error::InfeasibleInterval { .. }
            | Error::TooManyFitFailures { .. } => 3,
        }
    }
}
