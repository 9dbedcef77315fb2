use thiserror::Error;

/// Errors produced by the estimation, sampling and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// The quadratic program has no feasible point. `conflicting` lists the
    /// general inequality rows that were active when infeasibility was proven.
    #[error("quadratic program infeasible: row {row} violated by {violation:e} (conflicting rows {conflicting:?})")]
    Infeasible {
        row: usize,
        violation: f64,
        conflicting: Vec<usize>,
    },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("line {line}: index out of range: {msg}")]
    OutOfRange { line: u64, msg: String },

    #[error("initial dynamics violate {0} expert constraints")]
    InitInfeasible(usize),

    #[error("adapted step size {0:e} left the admissible range (1e-8, 1e2)")]
    PathologicalStepSize(f64),

    #[error("MCE fit diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
