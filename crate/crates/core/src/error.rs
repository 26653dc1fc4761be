//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data: length mismatches, non-finite values, empty input.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Outcome outside the family's support (e.g. Bernoulli y not in {0,1}).
    #[error("unsupported outcome for {family}: {detail}")]
    Support { family: &'static str, detail: String },

    /// Design matrix is rank deficient; `columns` names the dependent columns.
    #[error("rank-deficient design: columns {columns:?} are linearly dependent ({context})")]
    RankDeficient { columns: Vec<String>, context: String },

    /// An iterative fit exhausted its iteration budget or stalled.
    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    /// A linear system inside a solver lost positive definiteness.
    #[error("singular system in {0}")]
    SingularSystem(String),

    /// Invalid configuration (penalty, quadrature, experiment, CLI combination).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Variance component pinned at the boundary; Hessian-based SEs are unreliable.
    #[error(
        "random-effect variance estimate {omega_sq:.3e} is at the boundary; \
         Hessian standard errors are unavailable — use the cluster bootstrap"
    )]
    BoundaryVariance { omega_sq: f64 },

    /// Too many bootstrap replicates failed to refit.
    #[error("bootstrap failed: {0}")]
    BootstrapFailed(String),

    /// CSV input violated the dataset contract.
    #[error("csv error: {0}")]
    CsvContract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
