//! Simulated trial designs: Gaussian-covariate generators for continuous and
//! binary outcomes with configurable main effects and interaction structure,
//! plus the null-effect scenarios used to calibrate the permutation test.
//!
//! Continuous outcomes follow
//! `Y = (alpha' [1,x])^2 + F(x) T / 2 + sigma0 eps`, so the true effect is
//! `tau(x) = F(x)`. Binary outcomes follow the relative-risk / odds-product
//! pair `log(P1/P-1) = 2 F(x)` and
//! `log[P1 P-1 / ((1-P1)(1-P-1))] = -C - (alpha' [1,x])^2`, solved per row
//! for the two arm probabilities; the true effect is `tau(x) = e^{2F(x)}`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Matrix, OutcomeKind, TrialDataset};
use crate::seeding::{derive_rng, STREAM_SIM};
use crate::{Error, Result};

/// Covariance structure of the Gaussian covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    /// `Sigma_ij = rho^|i-j|`.
    Ar1,
    /// `Sigma_ij = rho + (1-rho) 1[i=j]`.
    CompoundSymmetric,
    Independent,
}

/// Effect-function coefficients:
/// `F(x) = intercept + sum_j linear_j x_j + sum_j square_j x_j^2
///        + sum pairs (i,j,c) c x_i x_j` (indices 0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteCoeffs {
    pub intercept: f64,
    pub linear: Vec<f64>,
    pub square: Vec<f64>,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl HteCoeffs {
    fn constant(c: f64, p: usize) -> Self {
        Self {
            intercept: c,
            linear: vec![0.0; p],
            square: vec![0.0; p],
            pairs: Vec::new(),
        }
    }

    fn value(&self, x_row: &[f64]) -> f64 {
        let mut v = self.intercept;
        for (j, &xj) in x_row.iter().enumerate() {
            v += self.linear[j] * xj + self.square[j] * xj * xj;
        }
        for &(i, j, c) in &self.pairs {
            v += c * x_row[i] * x_row[j];
        }
        v
    }
}

/// One simulated design, fully determined by its fields and `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub outcome_kind: OutcomeKind,
    /// Human-readable design identifier, echoed into provenance output.
    pub label: String,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub cov_structure: CovStructure,
    pub p_treat: f64,
    /// Main-effect coefficients, intercept first (length p+1).
    pub alpha: Vec<f64>,
    pub hte: HteCoeffs,
    /// Noise scale of the continuous outcome model (unused for binary).
    pub sigma0: f64,
    /// Odds-product offset C of the binary outcome model (unused for
    /// continuous).
    pub c_offset: f64,
    pub seed: u64,
}

/// Null-effect scenarios with strong (P1), weak (P2), and absent (P3) main
/// effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermScenario {
    P1,
    P2,
    P3,
}

fn dense(p: usize, entries: &[(usize, f64)]) -> Result<Vec<f64>> {
    // entries are (index, value) with index 0 = intercept
    let mut v = vec![0.0; p + 1];
    for &(idx, val) in entries {
        if idx >= v.len() {
            return Err(Error::InvalidParam(format!(
                "coefficient index {idx} requires p >= {idx}, got p = {p}"
            )));
        }
        v[idx] = val;
    }
    Ok(v)
}

impl SimSpec {
    /// Continuous designs 1-4: linear effect (1), strong (2), moderate (3)
    /// and constant (4) quadratic-with-pairs effects.
    pub fn continuous_setting(setting: u8, n: usize, p: usize, seed: u64) -> Result<Self> {
        let (alpha, hte) = match setting {
            1 => {
                let alpha = dense(
                    p,
                    &[(0, 0.4), (1, 0.6), (2, -0.6), (3, 0.6), (4, 0.6)],
                )?;
                let beta = dense(p, &[(0, 0.8), (1, 0.8), (2, -0.8), (3, 0.8), (4, 0.8)])?;
                let hte = HteCoeffs {
                    intercept: beta[0],
                    linear: beta[1..].to_vec(),
                    square: vec![0.0; p],
                    pairs: Vec::new(),
                };
                (alpha, hte)
            }
            2..=4 => {
                let a0 = 1.0 / 3f64.sqrt();
                let aj = 1.0 / (2.0 * 3f64.sqrt());
                let mut entries = vec![(0, a0)];
                entries.extend((3..=10).map(|j| (j, aj)));
                let alpha = dense(p, &entries)?;
                let (b, pairs): (f64, Vec<(usize, usize, f64)>) = match setting {
                    2 => (1.6, vec![(0, 1, 1.6), (0, 4, 1.6)]),
                    3 => (0.8, vec![(0, 1, 0.8), (0, 4, 0.8)]),
                    _ => (0.0, Vec::new()),
                };
                let beta = if setting == 4 {
                    dense(p, &[(0, 0.8)])?
                } else {
                    dense(p, &[(0, 0.8), (1, b), (2, -b), (3, b), (4, -b)])?
                };
                // effect terms enter as beta_j (x_j + x_j^2)
                let hte = HteCoeffs {
                    intercept: beta[0],
                    linear: beta[1..].to_vec(),
                    square: beta[1..].to_vec(),
                    pairs,
                };
                (alpha, hte)
            }
            other => {
                return Err(Error::InvalidParam(format!(
                    "continuous setting must be 1-4, got {other}"
                )))
            }
        };
        Ok(Self {
            outcome_kind: OutcomeKind::Continuous,
            label: format!("continuous_setting{setting}"),
            n,
            p,
            rho: 0.5,
            cov_structure: CovStructure::Ar1,
            p_treat: 0.5,
            alpha,
            hte,
            sigma0: 2.0,
            c_offset: 0.0,
            seed,
        })
    }

    /// Binary designs 1-3: strong, moderate, and absent interaction effects.
    pub fn binary_setting(setting: u8, n: usize, p: usize, seed: u64) -> Result<Self> {
        let alpha = dense(p, &[(0, 0.4), (1, 0.6), (2, -0.6), (3, 0.6), (4, 0.6)])?;
        let (beta, gamma, pairs, c) = match setting {
            1 => (
                dense(p, &[(0, 0.3), (1, 0.3), (2, 0.4), (3, 0.3), (4, 0.4)])?,
                dense(p, &[(1, 0.4), (2, -0.4), (3, 0.4), (4, 0.4)])?,
                vec![(0, 1, 0.5), (0, 4, 0.5)],
                2.5,
            ),
            2 => (
                dense(p, &[(0, 0.1), (1, 0.1), (2, 0.2), (3, 0.1), (4, 0.2)])?,
                dense(p, &[(1, 0.2), (2, -0.2), (3, 0.2), (4, 0.2)])?,
                vec![(0, 1, 0.5), (0, 4, 0.5)],
                2.5,
            ),
            3 => (dense(p, &[(0, 0.3)])?, dense(p, &[])?, Vec::new(), 2.0),
            other => {
                return Err(Error::InvalidParam(format!(
                    "binary setting must be 1-3, got {other}"
                )))
            }
        };
        Ok(Self {
            outcome_kind: OutcomeKind::Binary,
            label: format!("binary_setting{setting}"),
            n,
            p,
            rho: 0.5,
            cov_structure: CovStructure::Ar1,
            p_treat: 0.5,
            alpha,
            hte: HteCoeffs {
                intercept: beta[0],
                linear: beta[1..].to_vec(),
                square: gamma[1..].to_vec(),
                pairs,
            },
            sigma0: 0.0,
            c_offset: c,
            seed,
        })
    }

    /// Null-effect calibration scenarios. The continuous model is
    /// `Y = main + 0.8 T + 2 eps` (so `tau = 1.6` everywhere); the binary
    /// model has a constant log risk ratio of 0.3.
    pub fn permutation_scenario(
        scenario: PermScenario,
        outcome_kind: OutcomeKind,
        n: usize,
        p: usize,
        seed: u64,
    ) -> Result<Self> {
        let alpha = match scenario {
            PermScenario::P1 | PermScenario::P2 => {
                let s = match scenario {
                    PermScenario::P1 => 3f64.sqrt(),
                    _ => 6f64.sqrt(),
                };
                let mut entries = vec![(0, 1.0 / s)];
                entries.extend((3..=10).map(|j| (j, 1.0 / (2.0 * s))));
                dense(p, &entries)?
            }
            PermScenario::P3 => vec![0.0; p + 1],
        };
        let (hte, sigma0, c) = match outcome_kind {
            // constant effect 2*beta0 on the mean-difference scale
            OutcomeKind::Continuous => (HteCoeffs::constant(1.6, p), 2.0, 0.0),
            // constant log risk ratio beta0 = 0.3 = 2 F
            OutcomeKind::Binary => (HteCoeffs::constant(0.15, p), 0.0, 2.0),
        };
        Ok(Self {
            outcome_kind,
            label: format!("perm_{scenario:?}_{outcome_kind}").to_lowercase(),
            n,
            p,
            rho: 0.5,
            cov_structure: CovStructure::Ar1,
            p_treat: 0.5,
            alpha,
            hte,
            sigma0,
            c_offset: c,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::InvalidParam("n and p must be positive".into()));
        }
        if self.alpha.len() != self.p + 1 {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {} entries, expected p+1 = {}",
                self.alpha.len(),
                self.p + 1
            )));
        }
        if self.hte.linear.len() != self.p || self.hte.square.len() != self.p {
            return Err(Error::DimensionMismatch(
                "effect coefficient vectors must have length p".into(),
            ));
        }
        for &(i, j, _) in &self.hte.pairs {
            if i >= j || j >= self.p {
                return Err(Error::InvalidParam(format!(
                    "pair ({i},{j}) must satisfy i < j < p"
                )));
            }
        }
        if !(self.p_treat > 0.0 && self.p_treat < 1.0) {
            return Err(Error::InvalidParam("p_treat must lie in (0,1)".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidParam("rho must lie in (-1,1)".into()));
        }
        if self.outcome_kind == OutcomeKind::Continuous && !(self.sigma0 > 0.0) {
            return Err(Error::InvalidParam("sigma0 must be positive".into()));
        }
        Ok(())
    }

    /// Main-effect value `(alpha' [1,x])^2` at a covariate row.
    pub fn main_effect_at(&self, x_row: &[f64]) -> f64 {
        let mut lin = self.alpha[0];
        for (j, &xj) in x_row.iter().enumerate() {
            lin += self.alpha[j + 1] * xj;
        }
        lin * lin
    }

    /// True effect at a covariate row on the estimand scale: `F(x)` for
    /// continuous outcomes, `e^{2 F(x)}` for binary.
    pub fn true_tau_at(&self, x_row: &[f64]) -> f64 {
        let f = self.hte.value(x_row);
        match self.outcome_kind {
            OutcomeKind::Continuous => f,
            OutcomeKind::Binary => (2.0 * f).exp(),
        }
    }
}

/// A generated dataset together with the generating-model effect per row.
#[derive(Debug, Clone)]
pub struct TruthedDataset {
    pub dataset: TrialDataset,
    pub true_tau: Vec<f64>,
}

impl TruthedDataset {
    /// Empirical event rate (binary outcomes only).
    pub fn prevalence(&self) -> Option<f64> {
        match self.dataset.outcome_kind() {
            OutcomeKind::Binary => {
                Some(self.dataset.y().iter().sum::<f64>() / self.dataset.n() as f64)
            }
            OutcomeKind::Continuous => None,
        }
    }

    /// Write as CSV: y, t, covariates, true_tau.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let d = &self.dataset;
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "t".to_string()];
        header.extend(d.feature_names().iter().cloned());
        header.push(crate::data::TRUE_TAU_COLUMN.to_string());
        w.write_record(&header)?;
        for i in 0..d.n() {
            let mut rec = vec![d.y()[i].to_string(), d.t()[i].to_string()];
            rec.extend(d.x().row(i).iter().map(|v| v.to_string()));
            rec.push(self.true_tau[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw an n-by-p Gaussian covariate matrix.
pub fn sample_covariates<R: Rng>(
    n: usize,
    p: usize,
    rho: f64,
    structure: CovStructure,
    rng: &mut R,
) -> Result<Matrix> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::InvalidParam("rho must lie in (-1,1)".into()));
    }
    if structure == CovStructure::CompoundSymmetric && p > 1 {
        // positive definiteness of the equicorrelation matrix
        if rho <= -1.0 / (p as f64 - 1.0) {
            return Err(Error::InvalidParam(format!(
                "compound symmetry requires rho > -1/(p-1) = {}",
                -1.0 / (p as f64 - 1.0)
            )));
        }
    }
    let mut data = Vec::with_capacity(n * p);
    match structure {
        CovStructure::Independent => {
            for _ in 0..n * p {
                data.push(rng.sample(StandardNormal));
            }
        }
        CovStructure::Ar1 => {
            let scale = (1.0 - rho * rho).sqrt();
            for _ in 0..n {
                let mut prev: f64 = rng.sample(StandardNormal);
                data.push(prev);
                for _ in 1..p {
                    let z: f64 = rng.sample(StandardNormal);
                    prev = rho * prev + scale * z;
                    data.push(prev);
                }
            }
        }
        CovStructure::CompoundSymmetric => {
            // Sigma^(1/2) = a I + b 11', with a, b from the two eigenvalues
            let a = (1.0 - rho).sqrt();
            let b = ((1.0 - rho + p as f64 * rho).sqrt() - a) / p as f64;
            let mut z = vec![0.0; p];
            for _ in 0..n {
                let mut sum = 0.0;
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                    sum += *zj;
                }
                for &zj in &z {
                    data.push(a * zj + b * sum);
                }
            }
        }
    }
    Matrix::from_vec(data, n, p)
}

/// Unique pair `(P1, P-1)` in `(0,1)^2` with `log(P1/P-1) = log_rr` and
/// `log[P1 P-1 / ((1-P1)(1-P-1))] = log_odds_product`.
///
/// The odds product is strictly increasing in `P-1` along the risk-ratio
/// constraint, so bisection over `(0, min(1, e^{-log_rr}))` converges to the
/// unique root; a Newton polish on the log scale then restores full relative
/// accuracy when the probabilities are very small.
pub fn solve_risk_pair(log_rr: f64, log_odds_product: f64) -> (f64, f64) {
    let r = log_rr;
    let q = log_odds_product;
    let upper = (-r).exp().min(1.0);
    let phi = |pm1: f64| -> f64 {
        let p1 = r.exp() * pm1;
        if pm1 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p1 >= 1.0 || pm1 >= 1.0 {
            return f64::INFINITY;
        }
        r + 2.0 * pm1.ln() - (-p1).ln_1p() - (-pm1).ln_1p()
    };

    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * upper.max(1e-300) {
            break;
        }
    }

    let mut l = (0.5 * (lo + hi)).ln();
    let l_max = upper.ln();
    for _ in 0..10 {
        let pm1 = l.exp();
        let p1 = r.exp() * pm1;
        if !(pm1 > 0.0 && pm1 < 1.0 && p1 < 1.0) {
            break;
        }
        let val = r + 2.0 * l - (-p1).ln_1p() - (-pm1).ln_1p();
        let deriv = 2.0 + p1 / (1.0 - p1) + pm1 / (1.0 - pm1);
        let mut next = l - (val - q) / deriv;
        if next >= l_max {
            next = 0.5 * (l + l_max);
        }
        if (next - l).abs() < 1e-15 * (1.0 + l.abs()) {
            l = next;
            break;
        }
        l = next;
    }
    let pm1 = l.exp();
    (r.exp() * pm1, pm1)
}

/// Generate a continuous-outcome trial.
pub fn gen_continuous<R: Rng>(spec: &SimSpec, rng: &mut R) -> Result<TruthedDataset> {
    spec.validate()?;
    if spec.outcome_kind != OutcomeKind::Continuous {
        return Err(Error::InvalidParam(
            "gen_continuous requires a continuous spec".into(),
        ));
    }
    let x = sample_covariates(spec.n, spec.p, spec.rho, spec.cov_structure, rng)?;
    let mut y = Vec::with_capacity(spec.n);
    let mut t = Vec::with_capacity(spec.n);
    let mut tau = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let row = x.row(i);
        let f = spec.hte.value(row);
        let ti: i8 = if rng.random_bool(spec.p_treat) { 1 } else { -1 };
        let eps: f64 = rng.sample(StandardNormal);
        y.push(spec.main_effect_at(row) + f * f64::from(ti) / 2.0 + spec.sigma0 * eps);
        t.push(ti);
        tau.push(f);
    }
    let dataset = TrialDataset::new(
        y,
        t,
        x,
        spec.p_treat,
        None,
        OutcomeKind::Continuous,
        None,
    )?;
    Ok(TruthedDataset {
        dataset,
        true_tau: tau,
    })
}

/// Generate a binary-outcome trial from the relative-risk / odds-product
/// model.
pub fn gen_binary<R: Rng>(spec: &SimSpec, rng: &mut R) -> Result<TruthedDataset> {
    spec.validate()?;
    if spec.outcome_kind != OutcomeKind::Binary {
        return Err(Error::InvalidParam(
            "gen_binary requires a binary spec".into(),
        ));
    }
    let x = sample_covariates(spec.n, spec.p, spec.rho, spec.cov_structure, rng)?;
    let mut y = Vec::with_capacity(spec.n);
    let mut t = Vec::with_capacity(spec.n);
    let mut tau = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let row = x.row(i);
        let r = 2.0 * spec.hte.value(row);
        let q = -spec.c_offset - spec.main_effect_at(row);
        let (p1, pm1) = solve_risk_pair(r, q);
        let ti: i8 = if rng.random_bool(spec.p_treat) { 1 } else { -1 };
        let pt = if ti == 1 { p1 } else { pm1 };
        y.push(f64::from(rng.random_bool(pt.clamp(0.0, 1.0))));
        t.push(ti);
        tau.push(r.exp());
    }
    let dataset = TrialDataset::new(y, t, x, spec.p_treat, None, OutcomeKind::Binary, None)?;
    Ok(TruthedDataset {
        dataset,
        true_tau: tau,
    })
}

/// Generate a null-effect calibration dataset.
pub fn gen_permutation_scenario<R: Rng>(
    scenario: PermScenario,
    outcome_kind: OutcomeKind,
    n: usize,
    p: usize,
    rng: &mut R,
) -> Result<TruthedDataset> {
    let spec = SimSpec::permutation_scenario(scenario, outcome_kind, n, p, 0)?;
    match outcome_kind {
        OutcomeKind::Continuous => gen_continuous(&spec, rng),
        OutcomeKind::Binary => gen_binary(&spec, rng),
    }
}

/// Generate from a spec using its own seed; deterministic.
pub fn generate(spec: &SimSpec) -> Result<TruthedDataset> {
    let mut rng = derive_rng(spec.seed, &[STREAM_SIM]);
    match spec.outcome_kind {
        OutcomeKind::Continuous => gen_continuous(spec, &mut rng),
        OutcomeKind::Binary => gen_binary(spec, &mut rng),
    }
}
