//! Gradients, hessians, and loss values for the four fitting problems, plus
//! the augmentation transforms connecting the two stages.
//!
//! All formulas take a combined weight `w` (randomization weight times
//! sampling weight) that multiplies both the gradient and the hessian. The
//! weight factor is kept raw: at p_treat = 1/2 every sample carries w = 2,
//! which rescales the effective `gamma` and `lambda` by the same constant.
//!
//! Stage-1 losses target the main-effect augmentation:
//! * continuous: `w (y - A)^2`, minimized at `A* = (mu1 + mu-1)/2`;
//! * binary: `w [log(1 + e^A) - y A]`, minimized where
//!   `sigma(A*) = (mu1 + mu-1)/2`.
//!
//! Stage-2 losses target the effect function `F`:
//! * mean difference: `w (y - a0 - F t)^2`, minimized at
//!   `F* = (mu1 - mu-1)/2`, so `tau = 2 F*`;
//! * risk ratio: `w [(1 - y - a0) F t + y e^{-F t}]`, minimized at
//!   `F* = log(mu1 / mu-1)`, so `tau = e^{F*}`.
//!
//! The `*_noaug` variants set `a0 = 0`; the estimand is unchanged because the
//! augmentation term has mean zero under randomization.

use serde::{Deserialize, Serialize};

use crate::data::OutcomeKind;
use crate::{Error, Result};

/// Scale on which the heterogeneous effect is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// Difference of arm-wise conditional means (continuous or binary y).
    MeanDiff,
    /// Ratio of arm-wise event probabilities (binary y only).
    RiskRatio,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimand::MeanDiff => write!(f, "meandiff"),
            Estimand::RiskRatio => write!(f, "riskratio"),
        }
    }
}

/// Named loss selection, with the stage-2 augmented kinds carrying their
/// per-sample `a0` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Stage1Mse,
    Stage1Logistic,
    Stage2Meandiff,
    Stage2Riskratio,
    Stage2MeandiffNoaug,
    Stage2RiskratioNoaug,
}

impl LossKind {
    pub fn requires_aug(self) -> bool {
        matches!(self, LossKind::Stage2Meandiff | LossKind::Stage2Riskratio)
    }
}

/// A loss kind paired with its augmentation vector when one is required.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    pub aug: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind, aug: Option<Vec<f64>>) -> Result<Self> {
        match (kind.requires_aug(), &aug) {
            (true, None) => Err(Error::InvalidParam(format!(
                "loss {kind:?} requires an augmentation vector"
            ))),
            (false, Some(_)) => Err(Error::InvalidParam(format!(
                "loss {kind:?} does not accept an augmentation vector"
            ))),
            _ => Ok(Self { kind, aug }),
        }
    }

    pub fn validate_len(&self, n: usize) -> Result<()> {
        if let Some(a) = &self.aug {
            if a.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "augmentation vector has {} entries for {} rows",
                    a.len(),
                    n
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^a)` without overflow.
#[inline]
pub fn log1p_exp(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Gradient/hessian pairs (derivatives in the current prediction)
// ---------------------------------------------------------------------------

/// Stage 1, continuous: derivatives of `w (y - A)^2` in `A`.
#[inline]
pub fn grad_hess_stage1_continuous(y: f64, a_cur: f64, w: f64) -> (f64, f64) {
    (-2.0 * w * (y - a_cur), 2.0 * w)
}

/// Stage 1, binary: derivatives of `w [log(1 + e^A) - y A]` in the logit `A`.
#[inline]
pub fn grad_hess_stage1_binary(y: f64, a_cur: f64, w: f64) -> (f64, f64) {
    let s = sigmoid(a_cur);
    (w * (s - y), w * s * (1.0 - s))
}

/// Stage 2, mean difference: derivatives of `w (y - a0 - F t)^2` in `F`.
#[inline]
pub fn grad_hess_stage2_continuous(y: f64, a0: f64, f_cur: f64, t: i8, w: f64) -> (f64, f64) {
    let tf = f64::from(t);
    (-2.0 * w * tf * (y - a0 - f_cur * tf), 2.0 * w)
}

/// Stage 2, risk ratio: derivatives of
/// `w [(1 - y - a0) F t + y e^{-F t}]` in `F`. The hessian is zero exactly
/// when `y = 0`.
#[inline]
pub fn grad_hess_stage2_binary(y: f64, a0: f64, f_cur: f64, t: i8, w: f64) -> (f64, f64) {
    let tf = f64::from(t);
    let e = (-f_cur * tf).exp();
    let g = w * ((1.0 - y - a0) * tf - y * tf * e);
    let h = w * y * e;
    (g, h)
}

// ---------------------------------------------------------------------------
// Loss values (per-sample summands, used for diagnostic curves)
// ---------------------------------------------------------------------------

#[inline]
pub fn loss_stage1_continuous(y: f64, a: f64, w: f64) -> f64 {
    let r = y - a;
    w * r * r
}

#[inline]
pub fn loss_stage1_binary(y: f64, a: f64, w: f64) -> f64 {
    w * (log1p_exp(a) - y * a)
}

#[inline]
pub fn loss_stage2_continuous(y: f64, a0: f64, f: f64, t: i8, w: f64) -> f64 {
    let r = y - a0 - f * f64::from(t);
    w * r * r
}

#[inline]
pub fn loss_stage2_binary(y: f64, a0: f64, f: f64, t: i8, w: f64) -> f64 {
    let ft = f * f64::from(t);
    w * ((1.0 - y - a0) * ft + y * (-ft).exp())
}

// ---------------------------------------------------------------------------
// Augmentation and estimand transforms
// ---------------------------------------------------------------------------

/// Optimal augmentation for arbitrary effect value `f`, arm means, and
/// randomization probability. Used as a test oracle and for
/// oracle-augmentation experiments; the fitting pipeline estimates `a0` from
/// data instead.
///
/// When `f` equals the true effect function, the mean-difference form
/// collapses to `(mu1 + mu0)/2` and the risk-ratio form to `1 - (mu1 + mu0)`,
/// for every randomization probability.
pub fn optimal_aug_general(
    mu1: f64,
    mu0: f64,
    f: f64,
    p_treat: f64,
    estimand: Estimand,
) -> Result<f64> {
    if !(p_treat > 0.0 && p_treat < 1.0) {
        return Err(Error::InvalidParam(format!(
            "p_treat must lie in (0,1), got {p_treat}"
        )));
    }
    let q = 1.0 - p_treat;
    match estimand {
        Estimand::MeanDiff => Ok(mu1 * q + mu0 * p_treat - f * (q - p_treat)),
        Estimand::RiskRatio => {
            for (name, v) in [("mu1", mu1), ("mu0", mu0)] {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidParam(format!(
                        "{name} must lie in (0,1) for the risk-ratio estimand, got {v}"
                    )));
                }
            }
            Ok(1.0 - (1.0 + (-f).exp()) * mu1 * q - (1.0 + f.exp()) * mu0 * p_treat)
        }
    }
}

/// Transform a stage-1 prediction into the plug-in augmentation value.
///
/// * continuous / mean difference: identity (the weighted MSE minimizer is
///   already `(mu1 + mu-1)/2`);
/// * binary / risk ratio: `1 - 2 sigma(a_hat)`;
/// * binary / mean difference: `sigma(a_hat)`.
pub fn transform_stage1(a_hat: f64, outcome_kind: OutcomeKind, estimand: Estimand) -> Result<f64> {
    match (outcome_kind, estimand) {
        (OutcomeKind::Continuous, Estimand::MeanDiff) => Ok(a_hat),
        (OutcomeKind::Binary, Estimand::RiskRatio) => Ok(1.0 - 2.0 * sigmoid(a_hat)),
        (OutcomeKind::Binary, Estimand::MeanDiff) => Ok(sigmoid(a_hat)),
        (OutcomeKind::Continuous, Estimand::RiskRatio) => Err(Error::InvalidParam(
            "the risk-ratio estimand requires a binary outcome".into(),
        )),
    }
}

/// Map a fitted stage-2 value `F(x)` onto the effect scale:
/// `tau = 2 F` (mean difference) or `tau = e^F` (risk ratio).
#[inline]
pub fn transform_hte(f_hat: f64, estimand: Estimand) -> f64 {
    match estimand {
        Estimand::MeanDiff => 2.0 * f_hat,
        Estimand::RiskRatio => f_hat.exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent finite-difference oracle: derivatives of the loss summands
    // are checked against central differences, never against the gradient
    // formulas themselves.
    fn central_diff(f: impl Fn(f64) -> f64, at: f64) -> (f64, f64) {
        let eps = 2f64.powi(-10); // balances truncation vs rounding for all four losses
        let (fm, f0, fp) = (f(at - eps), f(at), f(at + eps));
        ((fp - fm) / (2.0 * eps), (fp - 2.0 * f0 + fm) / (eps * eps))
    }

    fn assert_close(label: &str, got: f64, want: f64, tol: f64) {
        let scale = want.abs().max(1.0);
        assert!(
            (got - want).abs() <= tol * scale,
            "{label}: got {got}, want {want}"
        );
    }

    #[test]
    fn stage1_continuous_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let y = rng.random_range(-3.0..3.0);
            let a = rng.random_range(-3.0..3.0);
            let w = rng.random_range(0.2..5.0);
            let (g, h) = grad_hess_stage1_continuous(y, a, w);
            let (fd_g, fd_h) = central_diff(|v| loss_stage1_continuous(y, v, w), a);
            assert_close("g", g, fd_g, 1e-6);
            assert_close("h", h, fd_h, 1e-6);
        }
    }

    #[test]
    fn stage1_binary_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let y = f64::from(rng.random_bool(0.5));
            let a = rng.random_range(-4.0..4.0);
            let w = rng.random_range(0.2..5.0);
            let (g, h) = grad_hess_stage1_binary(y, a, w);
            let (fd_g, fd_h) = central_diff(|v| loss_stage1_binary(y, v, w), a);
            assert_close("g", g, fd_g, 1e-6);
            assert_close("h", h, fd_h, 1e-6);
        }
    }

    #[test]
    fn stage2_continuous_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let y = rng.random_range(-3.0..3.0);
            let a0 = rng.random_range(-2.0..2.0);
            let f = rng.random_range(-2.0..2.0);
            let t: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
            let w = rng.random_range(0.2..5.0);
            let (g, h) = grad_hess_stage2_continuous(y, a0, f, t, w);
            let (fd_g, fd_h) = central_diff(|v| loss_stage2_continuous(y, a0, v, t, w), f);
            assert_close("g", g, fd_g, 1e-6);
            assert_close("h", h, fd_h, 1e-6);
        }
    }

    #[test]
    fn stage2_binary_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let y = f64::from(rng.random_bool(0.5));
            let a0 = rng.random_range(-0.9..0.9);
            let f = rng.random_range(-2.0..2.0);
            let t: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
            let w = rng.random_range(0.2..5.0);
            let (g, h) = grad_hess_stage2_binary(y, a0, f, t, w);
            let (fd_g, fd_h) = central_diff(|v| loss_stage2_binary(y, a0, v, t, w), f);
            assert_close("g", g, fd_g, 1e-6);
            assert_close("h", h, fd_h, 1e-6);
        }
    }

    #[test]
    fn stage1_continuous_examples() {
        assert_eq!(grad_hess_stage1_continuous(1.0, 0.0, 2.0), (-4.0, 4.0));
        assert_eq!(grad_hess_stage1_continuous(0.5, 0.5, 2.0), (0.0, 4.0));
        assert_eq!(grad_hess_stage1_continuous(-1.0, 1.0, 1.0), (4.0, 2.0));
    }

    #[test]
    fn stage1_binary_examples() {
        let (g, h) = grad_hess_stage1_binary(1.0, 0.0, 2.0);
        assert_relative_eq!(g, -1.0);
        assert_relative_eq!(h, 0.5);
        let (g, h) = grad_hess_stage1_binary(0.0, 0.0, 2.0);
        assert_relative_eq!(g, 1.0);
        assert_relative_eq!(h, 0.5);
        let (g, h) = grad_hess_stage1_binary(1.0, 40.0, 1.0);
        assert!(g.abs() < 1e-10 && h.abs() < 1e-10);
    }

    #[test]
    fn stage2_continuous_examples() {
        assert_eq!(
            grad_hess_stage2_continuous(1.0, 0.5, 0.0, 1, 2.0),
            (-2.0, 4.0)
        );
        assert_eq!(
            grad_hess_stage2_continuous(1.0, 0.5, 0.5, 1, 2.0),
            (0.0, 4.0)
        );
        assert_eq!(
            grad_hess_stage2_continuous(0.0, 0.5, 0.0, -1, 2.0),
            (-2.0, 4.0)
        );
    }

    #[test]
    fn stage2_binary_examples() {
        let (g, h) = grad_hess_stage2_binary(1.0, -0.2, 0.0, 1, 2.0);
        assert_relative_eq!(g, -1.6);
        assert_relative_eq!(h, 2.0);
        let (g, h) = grad_hess_stage2_binary(0.0, 0.0, 0.0, 1, 1.0);
        assert_eq!((g, h), (1.0, 0.0));
        let (g, h) = grad_hess_stage2_binary(1.0, 0.0, 2f64.ln(), 1, 1.0);
        assert_relative_eq!(g, -0.5);
        assert_relative_eq!(h, 0.5);
    }

    #[test]
    fn hessians_are_nonnegative_and_riskratio_zero_iff_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let w = rng.random_range(0.1..5.0);
            let a = rng.random_range(-5.0..5.0);
            let f = rng.random_range(-3.0..3.0);
            let t: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
            let y = f64::from(rng.random_bool(0.5));
            assert!(grad_hess_stage1_continuous(y, a, w).1 >= 0.0);
            assert!(grad_hess_stage1_binary(y, a, w).1 >= 0.0);
            assert!(grad_hess_stage2_continuous(y, 0.1, f, t, w).1 >= 0.0);
            let h = grad_hess_stage2_binary(y, 0.1, f, t, w).1;
            assert!(h >= 0.0);
            assert_eq!(h == 0.0, y == 0.0);
        }
    }

    #[test]
    fn optimal_aug_examples() {
        // effect value equal to the truth collapses the general form
        let a = optimal_aug_general(1.0, 0.4, 0.3, 0.37, Estimand::MeanDiff).unwrap();
        assert_relative_eq!(a, 0.7, max_relative = 1e-14);
        let a = optimal_aug_general(0.4, 0.2, 2f64.ln(), 0.81, Estimand::RiskRatio).unwrap();
        assert_relative_eq!(a, 0.4, max_relative = 1e-12);
        let a = optimal_aug_general(0.0, 0.0, 0.0, 0.5, Estimand::MeanDiff).unwrap();
        assert_eq!(a, 0.0);
        assert!(optimal_aug_general(1.2, 0.4, 0.0, 0.5, Estimand::RiskRatio).is_err());
        assert!(optimal_aug_general(0.4, 0.2, 0.0, 0.0, Estimand::RiskRatio).is_err());
    }

    #[test]
    fn optimal_aug_collapse_identities_over_p_grid() {
        // With f set to the true effect, the augmentation no longer depends
        // on the randomization probability.
        let (mu1, mu0) = (0.62, 0.21);
        for k in 1..=9 {
            let p = k as f64 / 10.0;
            let md = optimal_aug_general(mu1, mu0, (mu1 - mu0) / 2.0, p, Estimand::MeanDiff)
                .unwrap();
            assert!(
                (md - (mu1 + mu0) / 2.0).abs() < 1e-12,
                "p={p} meandiff {md}"
            );
            let rr =
                optimal_aug_general(mu1, mu0, (mu1 / mu0).ln(), p, Estimand::RiskRatio).unwrap();
            assert!(
                (rr - (1.0 - mu1 - mu0)).abs() < 1e-12,
                "p={p} riskratio {rr}"
            );
        }
    }

    #[test]
    fn transform_stage1_cases() {
        assert_eq!(
            transform_stage1(0.7, OutcomeKind::Continuous, Estimand::MeanDiff).unwrap(),
            0.7
        );
        assert_relative_eq!(
            transform_stage1(0.0, OutcomeKind::Binary, Estimand::RiskRatio).unwrap(),
            0.0
        );
        // logit(0.3) back through 1 - 2 sigma = 1 - 0.6
        let logit = (0.3f64 / 0.7).ln();
        assert_relative_eq!(
            transform_stage1(logit, OutcomeKind::Binary, Estimand::RiskRatio).unwrap(),
            0.4,
            max_relative = 1e-12
        );
        assert!(transform_stage1(0.0, OutcomeKind::Continuous, Estimand::RiskRatio).is_err());
    }

    #[test]
    fn transform_hte_cases() {
        assert_eq!(transform_hte(0.4, Estimand::MeanDiff), 0.8);
        assert_eq!(transform_hte(0.0, Estimand::RiskRatio), 1.0);
        assert_relative_eq!(transform_hte(2f64.ln(), Estimand::RiskRatio), 2.0);
    }

    #[test]
    fn loss_spec_pairing_enforced() {
        assert!(LossSpec::new(LossKind::Stage2Meandiff, None).is_err());
        assert!(LossSpec::new(LossKind::Stage2MeandiffNoaug, Some(vec![0.0])).is_err());
        let spec = LossSpec::new(LossKind::Stage2Riskratio, Some(vec![0.0, 0.1])).unwrap();
        assert!(spec.validate_len(2).is_ok());
        assert!(spec.validate_len(3).is_err());
    }
}
