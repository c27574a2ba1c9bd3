//! Error type shared by all numeric modules.

use thiserror::Error;

/// Errors produced by the numeric pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller-supplied argument is out of contract (empty range, zero step, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model evaluation produced NaN or infinity.
    #[error("domain violation: non-finite value from {context} at {point}")]
    NonFinite { context: String, point: String },

    /// A matrix that must be invertible is (numerically) singular.
    #[error("singular matrix in {0}")]
    Singular(String),

    /// An iterative solver ran out of iterations.
    #[error(
        "no convergence: {context} (last residual {residual:.3e} after {iterations} iterations)"
    )]
    NoConvergence {
        context: String,
        residual: f64,
        iterations: usize,
    },

    /// The ODE branch u = k(v) is not locally unique because f_u is singular.
    #[error("degenerate branch: {0}")]
    DegenerateBranch(String),

    /// Continuation found no non-constant solutions in the requested range.
    #[error(
        "branch not found in d-range [{lo}, {hi}]; constant-branch eigenvalue history: {history}"
    )]
    BranchNotFound { lo: f64, hi: f64, history: String },

    /// A spectral evaluation was requested too close to the essential spectrum.
    #[error("lambda = {lambda} lies within {radius:.1e} of the essential-spectrum sample {nearest} (node {node})")]
    NearEssentialSpectrum {
        lambda: f64,
        nearest: String,
        radius: f64,
        node: usize,
    },

    /// The fixed-point bracket [0, lambda_max] does not contain a sign change.
    #[error("lambda_max = {lambda_max} too small: eta0 still {eta_at_max:.6e} there (measured sup eta0 = {sup_eta:.6e})")]
    FixedPointRange {
        lambda_max: f64,
        eta_at_max: f64,
        sup_eta: f64,
    },

    /// Problem size exceeds the dense eigensolver cap.
    #[error("dense solve of {size} unknowns exceeds cap {cap}")]
    CapacityExceeded { size: usize, cap: usize },

    /// A trajectory left the trusted region.
    #[error("blow-up: sup-norm {norm:.3e} exceeded {cap:.1e} at t = {t}")]
    BlowUp { t: f64, norm: f64, cap: f64 },

    /// Not enough usable samples for a least-squares fit.
    #[error("fit failed: {0}")]
    Fit(String),

    /// A model registry spec string could not be parsed.
    #[error("unknown or malformed model spec: {0}")]
    ModelSpec(String),

    /// A state or report file could not be read or parsed.
    #[error("state file error: {0}")]
    StateFile(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
