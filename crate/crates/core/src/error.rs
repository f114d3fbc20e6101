//! Error type shared by every module of the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid grid, profile, solver or noise parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two fields that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Every cell of the density fell below the evaluation floor.
    #[error("density below evaluation floor on every cell")]
    AllMasked,

    #[error("time step {dt} violates the stability bound {bound}")]
    Cfl { dt: f64, bound: f64 },

    /// Masked cells exceed the fraction a solver can tolerate.
    #[error("masked fraction {fraction:.3} exceeds limit {limit:.3} at t = {t}")]
    MaskOverflow { fraction: f64, limit: f64, t: f64 },

    #[error("covariance kernel is not positive semi-definite on this grid (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("positivity policy gave up after {retries} retries at t = {t}")]
    PositivityExhausted { retries: usize, t: f64 },

    /// A numerical analysis step could not produce a meaningful value.
    #[error("analysis failed: {0}")]
    Analysis(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Every problem found while validating a run configuration.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn analysis(msg: impl Into<String>) -> Self {
        Error::Analysis(msg.into())
    }
}
