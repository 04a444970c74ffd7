use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or operator was used with an incompatible space.
    #[error("space mismatch: expected {expected}, found {found}")]
    SpaceMismatch { expected: String, found: String },

    /// Invalid argument outside of admissibility questions (non-finite time,
    /// empty grid, degenerate covariance, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters violate an admissibility condition (fast-slow gap,
    /// contraction window, hypothesis failure at model construction).
    #[error("admissibility error: {0}")]
    Admissibility(String),

    /// A read past the stored noise window; reports the extension needed.
    #[error("noise window exhausted: need coverage down to t = {needed_t}, path stores t in [{have_min}, {have_max}]")]
    WindowExhausted {
        needed_t: f64,
        have_min: f64,
        have_max: f64,
    },

    /// Fixed-point iteration did not reach tolerance.
    #[error("fixed-point iteration failed to converge: residual {residual:.3e} after {iterations} iterations")]
    Convergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    /// A trajectory left the divergence guard.
    #[error("numerical divergence at step {step}: state norm {norm:.3e}")]
    Divergence { step: usize, norm: f64 },

    /// All particle weights collapsed.
    #[error("filter degeneracy: effective sample size {ess:.2} of {n} particles")]
    Degeneracy { ess: f64, n: usize },

    /// Incompatible time grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Filter estimates evaluated on different dictionaries.
    #[error("dictionary mismatch: {0}")]
    DictionaryMismatch(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
