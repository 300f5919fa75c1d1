//! Two-stage gradient boosted trees (TSGBT) for heterogeneous treatment
//! effects in randomized trials.
//!
//! The library estimates how a randomized treatment's effect varies with
//! baseline covariates. Treatment is coded -1/+1 and the analysis is placed in
//! an equally randomized pseudo-population by inverse-probability weights, so
//! the heterogeneous effect can be fit directly without modeling main effects
//! jointly. Fitting proceeds in two stages:
//!
//! 1. a boosted ensemble for the main-effect augmentation term `a0(x)`, fit
//!    under a weighted squared-error (continuous) or logistic (binary) loss;
//! 2. a boosted ensemble for the effect function `F(x)` under an augmented
//!    loss with `a0` plugged in, whose minimizer is half the mean difference
//!    (continuous) or the log risk ratio (binary).
//!
//! The augmentation only affects efficiency, never the estimand, so a
//! misspecified first stage still yields consistent second-stage estimates.
//! A conditional permutation test ([`inference`]) assesses global evidence of
//! effect heterogeneity, and [`simgen`] reproduces the Monte Carlo designs
//! used to validate the procedure.
//!
//! Trees are grown by exact greedy search on a second-order expansion of the
//! loss, with per-leaf complexity (`gamma`) and leaf L2 (`lambda`) penalties;
//! see [`trees`]. All randomized steps derive substreams from a single seed
//! and are reproducible independent of thread count.

// Validation guards use negated float comparisons (`!(x > 0.0)`) so that
// NaN fails validation; the un-negated form would accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod simgen;
pub mod trees;
pub mod twostage;

mod boost;
mod error;
mod seeding;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
