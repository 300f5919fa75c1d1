//! Evaluation metrics and gain-based variable importance.

use serde::{Deserialize, Serialize};

use crate::losses::Estimand;
use crate::trees::{Ensemble, Node};
use crate::{Error, Result};

/// Average ranks, ties receiving the mean of their rank range.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_unstable_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidData(
            "rank correlation requires at least two values".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..ra.len() {
        let (da, db) = (ra[i] - ma, rb[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidData(
            "rank correlation is undefined for a constant vector".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Mean squared error on the estimand's natural scale: raw differences for
/// mean difference, log-scale differences for risk ratios.
pub fn mse_scale(est: &[f64], truth: &[f64], estimand: Estimand) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            est.len(),
            truth.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::InvalidData("empty vectors".into()));
    }
    let mut sum = 0.0;
    for (&e, &t) in est.iter().zip(truth) {
        let d = match estimand {
            Estimand::MeanDiff => e - t,
            Estimand::RiskRatio => {
                if !(e > 0.0 && t > 0.0) {
                    return Err(Error::InvalidData(format!(
                        "risk ratios must be positive, got estimate {e} and truth {t}"
                    )));
                }
                e.ln() - t.ln()
            }
        };
        sum += d * d;
    }
    Ok(sum / est.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    pub index: usize,
    pub raw_gain: f64,
    /// Max-normalized to 100.
    pub relative: f64,
}

/// Per-feature total split gain, sorted descending (ties by feature index).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub entries: Vec<ImportanceEntry>,
}

/// Sum each accepted split's gain by feature over all trees and normalize so
/// the top feature scores 100. An ensemble without any split yields an empty
/// report.
pub fn variable_importance(
    ensemble: &Ensemble,
    feature_names: &[String],
) -> Result<ImportanceReport> {
    if feature_names.len() != ensemble.n_features {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {} features",
            feature_names.len(),
            ensemble.n_features
        )));
    }
    let mut gains = vec![0.0; ensemble.n_features];
    let mut any = false;
    for tree in &ensemble.trees {
        for node in tree.nodes() {
            if let Node::Split { feature, gain, .. } = node {
                gains[*feature] += gain;
                any = true;
            }
        }
    }
    if !any {
        return Ok(ImportanceReport::default());
    }
    let max = gains.iter().cloned().fold(f64::MIN, f64::max);
    let mut entries: Vec<ImportanceEntry> = gains
        .iter()
        .enumerate()
        .map(|(index, &raw_gain)| ImportanceEntry {
            feature: feature_names[index].clone(),
            index,
            raw_gain,
            relative: 100.0 * raw_gain / max,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.raw_gain
            .partial_cmp(&a.raw_gain)
            .expect("finite gains")
            .then(a.index.cmp(&b.index))
    });
    Ok(ImportanceReport { entries })
}
