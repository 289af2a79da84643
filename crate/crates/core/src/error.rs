//! Error type shared by all pipeline stages.

use thiserror::Error;

/// Errors produced by the series algebra, the period selection and the
/// orbit construction. Each variant maps to one CLI exit code, see the
/// `peritorus-cli` crate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degree cap {have} too small, need at least {need}")]
    CapTooSmall { have: u32, need: u32 },

    #[error("second-order Melnikov check failed: margin {margin:.3e} < 1 at ell={ell:?}, h={h:?}")]
    MelnikovFailed {
        margin: f64,
        ell: Vec<i64>,
        h: Vec<i64>,
    },

    #[error("small divisor |omega.ell + Omega.(a-abar)| = {value:.3e} below floor {floor:.3e} at ell={ell:?}, a-abar={h:?}")]
    SmallDivisor {
        value: f64,
        floor: f64,
        ell: Vec<i64>,
        h: Vec<i64>,
    },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("gcd precondition violated: gcd(a_1..a_n, M) = {gcd} != 1")]
    GcdPrecondition { gcd: i64 },

    #[error("lemma hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("ergodization budget exhausted after {elapsed:.3e} time units; best margin reached {best_margin:.3e}")]
    BudgetExhausted { elapsed: f64, best_margin: f64 },

    #[error("period selection refused: {0}")]
    PeriodRefused(String),

    #[error("contraction refused: |L(P(0))| = {lp0:.3e}, measured sup|DP| = {dp:.3e} exceeds 1/(2|L|) = {bound:.3e}")]
    ContractionRefused { lp0: f64, dp: f64, bound: f64 },

    #[error("contraction did not converge within {max_iter} iterations (last step {last_step:.3e})")]
    ContractionDiverged { max_iter: usize, last_step: f64 },

    #[error("closure tolerance unmet: residual {residual:.3e} > {tol:.3e}")]
    ClosureNotMet { residual: f64, tol: f64 },

    #[error("internal consistency check failed: {0}")]
    InternalConsistency(String),
}

pub type CoreResult<T> = Result<T, CoreError>;
