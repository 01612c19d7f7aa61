//! Exact finite-sample inference for fixed-design linear models with
//! exchangeable errors, via the cyclic permutation test (CPT).
//!
//! The pipeline is
//!
//! 1. [`hypothesis::reduce`] rotates a general linear hypothesis `Rᵀβ = 0`
//!    into the sub-hypothesis `β₁ = … = β_r = 0`;
//! 2. [`ordering`] searches for a row pre-ordering that maximizes the signal
//!    objective `O*(ΠX)`;
//! 3. [`construction`] builds coefficient vectors `η₀ … η_m` that are cyclic
//!    shifts of one another and match the nuisance part of the design;
//! 4. [`rank_test`] ranks the median-centered statistics `yᵀη_j` and
//!    reports the p-value `R₀ / (m + 1)`.
//!
//! [`ci`] inverts the test for a single contrast and [`sim`] runs Monte Carlo
//! size and power studies against the classical t/F-test.

pub mod ci;
pub mod construction;
mod error;
pub mod hypothesis;
pub mod linalg;
pub mod ordering;
pub mod rng;
pub mod sim;
pub mod spectral;

pub use error::{CptError, Result};

pub use ci::{invert, InversionResult};
pub use construction::{
    build_b, shift_operator, solve_eta_general, solve_eta_r1, solve_validity_only, EtaSystem, ShiftPlan, WeightMatrix,
};
pub use hypothesis::{reduce, ContrastSpec, ReducedProblem};
pub use ordering::{
    evaluate, ga_optimize, stochastic_search, OrderingConfig, OrderingMethod, OrderingSolution, Permutation,
};
pub use rank_test::{
    center, cpt, marginal_rank_test, statistics, CptOptions, CptOutcome, CyclicStatistics, RankDecision, Warning,
};
