//! Conditional permutation test for global treatment-effect heterogeneity.
//!
//! The null hypothesis is a constant effect. Holding the stage-1 augmentation
//! `a0`, outcomes, treatment codes, and weights fixed in their original row
//! order, whole covariate rows are permuted jointly and the second stage is
//! refit on each permuted matrix with the same configuration (including the
//! round count chosen for the observed fit). The dispersion of the refit
//! effect estimates across rows forms the reference distribution; the
//! p-value is the proportion of permuted dispersions at least as large as
//! the observed one.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::replicate_seed;
use crate::data::TrialDataset;
use crate::losses::{transform_hte, Estimand, LossKind};
use crate::seeding::{derive_rng, STREAM_PERMUTATION};
use crate::trees::{BoostParams, FeatureCache};
use crate::twostage::fit_stage2_on_matrix;
use crate::{Error, Result};

/// Dispersion statistic computed over the per-row effect estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    /// Sample variance with the n-1 divisor.
    Variance,
    /// Median absolute deviation about the median, unscaled.
    Mad,
}

impl std::fmt::Display for StatKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StatKind::Variance => write!(f, "variance"),
            StatKind::Mad => write!(f, "mad"),
        }
    }
}

/// Dispersion of the effect estimates: sample variance or MAD.
pub fn dispersion_stat(tau: &[f64], kind: StatKind) -> Result<f64> {
    if tau.len() < 2 {
        return Err(Error::InvalidData(
            "dispersion requires at least two values".into(),
        ));
    }
    // a constant vector has zero dispersion exactly, not up to rounding
    if tau.windows(2).all(|w| w[0] == w[1]) {
        return Ok(0.0);
    }
    match kind {
        StatKind::Variance => {
            let n = tau.len() as f64;
            let mean = tau.iter().sum::<f64>() / n;
            Ok(tau.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        }
        StatKind::Mad => {
            let med = median(tau);
            let devs: Vec<f64> = tau.iter().map(|v| (v - med).abs()).collect();
            Ok(median(&devs))
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Permutation test settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_permutations: usize,
    pub stat_kind: StatKind,
    pub seed: u64,
    /// Use the (1 + #exceedances) / (1 + B) variant instead of #/B.
    pub add_one: bool,
    /// Re-run cross-validated round selection inside every replicate instead
    /// of freezing the observed fit's round count (slower; sensitivity
    /// analysis). Requires `params.cv` to be set.
    pub retune: bool,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            n_permutations: 200,
            stat_kind: StatKind::Variance,
            seed: 0,
            add_one: false,
            retune: false,
        }
    }
}

/// Outcome of the permutation test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed_stat: f64,
    pub perm_stats: Vec<f64>,
    pub p_value: f64,
    pub stat_kind: StatKind,
    pub n_permutations: usize,
    pub seed: u64,
    pub add_one: bool,
}

/// Proportion of permuted statistics at least as large as the observed one.
pub fn p_value_ge(observed: f64, perm_stats: &[f64], add_one: bool) -> f64 {
    let count = perm_stats.iter().filter(|&&s| s >= observed).count();
    if add_one {
        (1 + count) as f64 / (1 + perm_stats.len()) as f64
    } else {
        count as f64 / perm_stats.len() as f64
    }
}

/// Run the conditional permutation test.
///
/// `a0` is the stage-1 augmentation on the original rows, `observed_tau` the
/// effect estimates of the observed stage-2 fit, and `params2` the observed
/// fit's configuration with `n_rounds` set to its chosen round count
/// (`cv: None` unless `config.retune`). Replicates run concurrently on
/// independent substreams of `config.seed` and are collected in replicate
/// order.
pub fn permutation_test(
    data: &TrialDataset,
    a0: &[f64],
    observed_tau: &[f64],
    params2: &BoostParams,
    estimand: Estimand,
    config: &PermutationConfig,
) -> Result<PermutationResult> {
    if config.n_permutations == 0 {
        return Err(Error::InvalidParam(
            "at least one permutation is required".into(),
        ));
    }
    if a0.len() != data.n() || observed_tau.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "a0 has {} and observed_tau has {} entries for {} rows",
            a0.len(),
            observed_tau.len(),
            data.n()
        )));
    }
    if config.retune && params2.cv.is_none() {
        return Err(Error::InvalidParam(
            "retune requires cross-validation settings in params".into(),
        ));
    }
    let observed_stat = dispersion_stat(observed_tau, config.stat_kind)?;

    let perm_stats: Vec<f64> = (0..config.n_permutations)
        .into_par_iter()
        .map(|b| -> Result<f64> {
            let mut rng = derive_rng(config.seed, &[STREAM_PERMUTATION, b as u64]);
            let mut perm: Vec<usize> = (0..data.n()).collect();
            perm.shuffle(&mut rng);
            let x_perm = data.x().permuted_rows(&perm);
            let cache = FeatureCache::build(&x_perm);
            let mut params = params2.clone();
            params.seed = replicate_seed(config.seed, b as u64);
            if !config.retune {
                params.cv = None;
            }
            let kind = match estimand {
                Estimand::MeanDiff => LossKind::Stage2Meandiff,
                Estimand::RiskRatio => LossKind::Stage2Riskratio,
            };
            let out = fit_stage2_on_matrix(&x_perm, &cache, data, a0, &params, estimand, kind)?;
            let tau: Vec<f64> = (0..data.n())
                .map(|i| transform_hte(out.train_preds[i], estimand))
                .collect();
            if std::env::var("PERMDIAG").is_ok() {
                let tau2: Vec<f64> = (0..data.n())
                    .map(|i| transform_hte(out.ensemble.predict(x_perm.row(i)).unwrap(), estimand))
                    .collect();
                eprintln!("replicate {b}: perm[0..6] = {:?}", &perm[..6]);
                eprintln!("  train_preds tau var = {:?}", dispersion_stat(&tau, config.stat_kind));
                eprintln!("  predict     tau var = {:?}", dispersion_stat(&tau2, config.stat_kind));
            }
            dispersion_stat(&tau, config.stat_kind)
        })
        .collect::<Result<Vec<f64>>>()?;

    let p_value = p_value_ge(observed_stat, &perm_stats, config.add_one);
    Ok(PermutationResult {
        observed_stat,
        perm_stats,
        p_value,
        stat_kind: config.stat_kind,
        n_permutations: config.n_permutations,
        seed: config.seed,
        add_one: config.add_one,
    })
}
