use thiserror::Error;

pub type Result<T> = std::result::Result<T, CptError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CptError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contrast not full rank (rank {rank} < r = {r})")]
    ContrastNotFullRank { rank: usize, r: usize },

    #[error("too many constraints (r = {r} > p = {p})")]
    TooManyConstraints { r: usize, p: usize },

    /// `n / (p - r) > m` fails.
    #[error("validity condition violated: need n/(p-r) > m, got n = {n}, p-r = {nuisance}, m = {m}")]
    ValidityConditionViolated { n: usize, nuisance: usize, m: usize },

    /// `n ≥ pm - r + 1` fails (`n ≥ pm` when r = 1).
    #[error("power condition violated: need {}, got n = {n}, p = {p}, m = {m}, r = {r}", power_condition(*.r))]
    PowerConditionViolated { n: usize, p: usize, m: usize, r: usize },

    #[error("degenerate system: {0}")]
    DegenerateSystem(String),

    #[error("construction residual {residual:.3e} exceeds tolerance {tolerance:.3e} ({condition})")]
    ConstructionTolerance {
        condition: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("interval undefined (unbounded): {0}")]
    IntervalUndefined(String),

    #[error("multivariate inversion unsupported (r = {0})")]
    MultivariateInversion(usize),

    #[error("signal calibration did not converge: {0}")]
    Calibration(String),

    #[error("rank-deficient design: {0}")]
    RankDeficientDesign(String),
}

fn power_condition(r: usize) -> &'static str {
    if r == 1 {
        "n ≥ pm"
    } else {
        "n ≥ pm - r + 1"
    }
}
