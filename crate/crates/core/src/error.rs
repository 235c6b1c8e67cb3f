//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Magnitude below which a field value may not be used as a denominator.
/// The paper's small-data regime keeps Θ, B̂, ρ̄ and det∇X uniformly
/// positive; tripping this guard means the run left that regime.
pub const POSITIVITY_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum Error {
    /// A field used as a denominator dipped below [`POSITIVITY_GUARD`].
    #[error("degenerate denominator in {what}: min |value| = {min:.3e}")]
    Degenerate { what: &'static str, min: f64 },

    #[error("{what} must be strictly positive, found min = {min:.3e}")]
    NonPositive { what: &'static str, min: f64 },

    /// Temperature (or density) left the Theorem-3.2 bracket
    /// [Θ*/2, 3Θ*/2]; the run is outside the validity regime.
    #[error("{what} out of regime: range [{min:.6}, {max:.6}] vs allowed [{lo:.6}, {hi:.6}] (first at node {at:?})")]
    OutOfRegime {
        what: &'static str,
        min: f64,
        max: f64,
        lo: f64,
        hi: f64,
        at: (usize, usize, usize),
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    /// det ∇X fell below the invertibility threshold: the flow left the
    /// Lemma-4.1 regime.
    #[error("flow map degenerate: det grad X = {det:.3e} at node ({i},{j})")]
    FlowDegenerate { det: f64, i: usize, j: usize },

    #[error("inverse-map iteration did not converge (residual {residual:.3e} after {iters} iterations)")]
    InverseMapDiverged { residual: f64, iters: usize },

    /// Picard successive-difference ratio was >= 1 for three consecutive
    /// iterations.
    #[error("fixed-point iteration is not contracting (last ratio {ratio:.3})")]
    NotContracting { ratio: f64 },

    #[error("implicit solve failed: {0}")]
    ImplicitSolve(String),

    /// Per-column dense solve for the temperature tendency is singular.
    #[error("column tendency solve singular at column ({i},{j})")]
    ColumnSolveSingular { i: usize, j: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
