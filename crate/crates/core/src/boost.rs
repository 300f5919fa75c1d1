//! Boosting engine: objectives, round-synchronized cross-validated early
//! stopping, and final refits.
//!
//! The engine is shared by every fit in the crate (both stages, the no-aug
//! comparator, per-arm fits, permutation refits). With cross-validation
//! enabled, all folds advance one round at a time and the pooled held-out
//! loss decides the round count; the final model is then refit on all rows
//! with that count. Fold training runs in parallel, but each fold owns a
//! seeded RNG substream and losses are pooled in fold order, so results do
//! not depend on scheduling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::losses;
use crate::losses::LossKind;
use crate::seeding::{derive_rng, derive_seed, FINAL_STREAM, STREAM_FOLD_ASSIGN, STREAM_TREE};
use crate::trees::{grow_tree_on_rows, BoostParams, Ensemble, FeatureCache};
use crate::{Error, Result};

/// Per-round mean held-out loss (cross-validated fits) or training loss
/// (fixed-round fits); index k is the loss after k trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCurve {
    pub losses: Vec<f64>,
    /// Round count actually used by the final model.
    pub chosen_round: usize,
    /// Whether `losses` are held-out (cross-validated) values.
    pub from_cv: bool,
}

/// A differentiable per-sample objective over a fixed dataset.
pub(crate) trait Objective: Sync {
    /// Loss identifier recorded on the fitted ensemble.
    fn kind(&self) -> LossKind;
    /// Intercept-only minimizer over the given rows; the ensemble's starting
    /// prediction.
    fn base(&self, rows: &[usize]) -> Result<f64>;
    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64);
    fn loss(&self, i: usize, pred: f64) -> f64;
    fn weight(&self, i: usize) -> f64;
}

pub(crate) struct Stage1Continuous<'a> {
    pub y: &'a [f64],
    pub w: Vec<f64>,
}

impl Objective for Stage1Continuous<'_> {
    fn kind(&self) -> LossKind {
        LossKind::Stage1Mse
    }

    fn base(&self, rows: &[usize]) -> Result<f64> {
        let (mut sy, mut sw) = (0.0, 0.0);
        for &i in rows {
            sy += self.w[i] * self.y[i];
            sw += self.w[i];
        }
        Ok(sy / sw)
    }

    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64) {
        losses::grad_hess_stage1_continuous(self.y[i], pred, self.w[i])
    }

    fn loss(&self, i: usize, pred: f64) -> f64 {
        losses::loss_stage1_continuous(self.y[i], pred, self.w[i])
    }

    fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }
}

pub(crate) struct Stage1Binary<'a> {
    pub y: &'a [f64],
    pub w: Vec<f64>,
}

impl Objective for Stage1Binary<'_> {
    fn kind(&self) -> LossKind {
        LossKind::Stage1Logistic
    }

    fn base(&self, rows: &[usize]) -> Result<f64> {
        let (mut sy, mut sw) = (0.0, 0.0);
        for &i in rows {
            sy += self.w[i] * self.y[i];
            sw += self.w[i];
        }
        let ybar = sy / sw;
        if !(ybar > 0.0 && ybar < 1.0) {
            return Err(Error::InvalidData(
                "binary outcomes are all 0 or all 1 in a training set".into(),
            ));
        }
        Ok((ybar / (1.0 - ybar)).ln())
    }

    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64) {
        losses::grad_hess_stage1_binary(self.y[i], pred, self.w[i])
    }

    fn loss(&self, i: usize, pred: f64) -> f64 {
        losses::loss_stage1_binary(self.y[i], pred, self.w[i])
    }

    fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }
}

pub(crate) struct Stage2Continuous<'a> {
    pub y: &'a [f64],
    pub t: &'a [i8],
    pub a0: &'a [f64],
    pub w: Vec<f64>,
    pub kind: LossKind,
}

impl Objective for Stage2Continuous<'_> {
    fn kind(&self) -> LossKind {
        self.kind
    }

    fn base(&self, rows: &[usize]) -> Result<f64> {
        // minimizer of sum w (y - a0 - c t)^2 over the constant c
        let (mut num, mut den) = (0.0, 0.0);
        for &i in rows {
            num += self.w[i] * f64::from(self.t[i]) * (self.y[i] - self.a0[i]);
            den += self.w[i];
        }
        Ok(num / den)
    }

    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64) {
        losses::grad_hess_stage2_continuous(self.y[i], self.a0[i], pred, self.t[i], self.w[i])
    }

    fn loss(&self, i: usize, pred: f64) -> f64 {
        losses::loss_stage2_continuous(self.y[i], self.a0[i], pred, self.t[i], self.w[i])
    }

    fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }
}

pub(crate) struct Stage2Binary<'a> {
    pub y: &'a [f64],
    pub t: &'a [i8],
    pub a0: &'a [f64],
    pub w: Vec<f64>,
    pub kind: LossKind,
}

impl Objective for Stage2Binary<'_> {
    fn kind(&self) -> LossKind {
        self.kind
    }

    fn base(&self, rows: &[usize]) -> Result<f64> {
        // Newton iteration for the intercept-only minimizer; the first-order
        // condition is strictly increasing in c, so the root is unique. It
        // exists only with events in both arms.
        let mut arm_events = [false, false];
        for &i in rows {
            if self.y[i] == 1.0 {
                arm_events[usize::from(self.t[i] == 1)] = true;
            }
        }
        if !(arm_events[0] && arm_events[1]) {
            return Err(Error::InvalidData(
                "risk-ratio fitting requires events in both treatment arms".into(),
            ));
        }
        let mut c = 0.0;
        for _ in 0..100 {
            let (mut g, mut h) = (0.0, 0.0);
            for &i in rows {
                let (gi, hi) =
                    losses::grad_hess_stage2_binary(self.y[i], self.a0[i], c, self.t[i], self.w[i]);
                g += gi;
                h += hi;
            }
            let step = (g / h).clamp(-4.0, 4.0);
            c -= step;
            if step.abs() < 1e-13 * (1.0 + c.abs()) {
                break;
            }
        }
        Ok(c)
    }

    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64) {
        losses::grad_hess_stage2_binary(self.y[i], self.a0[i], pred, self.t[i], self.w[i])
    }

    fn loss(&self, i: usize, pred: f64) -> f64 {
        losses::loss_stage2_binary(self.y[i], self.a0[i], pred, self.t[i], self.w[i])
    }

    fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }
}

/// Either stage-2 objective behind one type, for callers generic over the
/// estimand.
pub(crate) enum Stage2Objective<'a> {
    MeanDiff(Stage2Continuous<'a>),
    RiskRatio(Stage2Binary<'a>),
}

impl Objective for Stage2Objective<'_> {
    fn kind(&self) -> LossKind {
        match self {
            Stage2Objective::MeanDiff(o) => o.kind(),
            Stage2Objective::RiskRatio(o) => o.kind(),
        }
    }

    fn base(&self, rows: &[usize]) -> Result<f64> {
        match self {
            Stage2Objective::MeanDiff(o) => o.base(rows),
            Stage2Objective::RiskRatio(o) => o.base(rows),
        }
    }

    fn grad_hess(&self, i: usize, pred: f64) -> (f64, f64) {
        match self {
            Stage2Objective::MeanDiff(o) => o.grad_hess(i, pred),
            Stage2Objective::RiskRatio(o) => o.grad_hess(i, pred),
        }
    }

    fn loss(&self, i: usize, pred: f64) -> f64 {
        match self {
            Stage2Objective::MeanDiff(o) => o.loss(i, pred),
            Stage2Objective::RiskRatio(o) => o.loss(i, pred),
        }
    }

    fn weight(&self, i: usize) -> f64 {
        match self {
            Stage2Objective::MeanDiff(o) => o.weight(i),
            Stage2Objective::RiskRatio(o) => o.weight(i),
        }
    }
}

/// Assign a fold id to every position of `rows`, stratified by the label in
/// `strata` so every fold's training part keeps all strata represented.
pub(crate) fn assign_folds(rows: &[usize], strata: &[u64], k: usize, seed: u64) -> Vec<usize> {
    let mut by_stratum: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (pos, &r) in rows.iter().enumerate() {
        by_stratum.entry(strata[r]).or_default().push(pos);
    }
    let mut rng = derive_rng(seed, &[STREAM_FOLD_ASSIGN]);
    let mut fold = vec![0usize; rows.len()];
    for positions in by_stratum.values_mut() {
        positions.shuffle(&mut rng);
        for (i, &pos) in positions.iter().enumerate() {
            fold[pos] = i % k;
        }
    }
    fold
}

struct RoundTrainer<'a, O: Objective> {
    x: &'a Matrix,
    cache: &'a FeatureCache,
    obj: &'a O,
    params: &'a BoostParams,
    stream: u64,
    rows_train: Vec<usize>,
    rows_eval: Vec<usize>,
    preds: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    trees: Vec<crate::trees::RegressionTree>,
    base: f64,
}

impl<'a, O: Objective> RoundTrainer<'a, O> {
    fn new(
        x: &'a Matrix,
        cache: &'a FeatureCache,
        obj: &'a O,
        params: &'a BoostParams,
        stream: u64,
        rows_train: Vec<usize>,
        rows_eval: Vec<usize>,
    ) -> Result<Self> {
        let base = obj.base(&rows_train)?;
        let mut preds = vec![0.0; x.n_rows()];
        for &i in rows_train.iter().chain(rows_eval.iter()) {
            preds[i] = base;
        }
        Ok(Self {
            x,
            cache,
            obj,
            params,
            stream,
            rows_train,
            rows_eval,
            preds,
            g: vec![0.0; x.n_rows()],
            h: vec![0.0; x.n_rows()],
            trees: Vec::new(),
            base,
        })
    }

    fn step(&mut self, round: usize) -> Result<()> {
        for &i in &self.rows_train {
            let (gi, hi) = self.obj.grad_hess(i, self.preds[i]);
            self.g[i] = gi;
            self.h[i] = hi;
        }
        let mut rng = derive_rng(self.params.seed, &[STREAM_TREE, self.stream, round as u64]);
        let tree = grow_tree_on_rows(
            &self.g,
            &self.h,
            self.x,
            self.cache,
            &self.rows_train,
            self.params,
            &mut rng,
        )?;
        let eta = self.params.learning_rate;
        for &i in self.rows_train.iter().chain(self.rows_eval.iter()) {
            self.preds[i] += eta * tree.predict_unchecked(self.x.row(i));
        }
        self.trees.push(tree);
        Ok(())
    }

    fn loss_over(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.obj.loss(i, self.preds[i])).sum()
    }

    fn weight_over(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.obj.weight(i)).sum()
    }
}

/// Result of one boosted fit.
pub(crate) struct FitOutput {
    pub ensemble: Ensemble,
    pub curve: DiagnosticCurve,
    /// Final-model predictions; only entries at the training rows are
    /// meaningful.
    pub train_preds: Vec<f64>,
}

/// Fit a boosted ensemble for `obj` on `rows` (sorted ascending).
///
/// With `params.cv` set, the round count is chosen by stratified k-fold
/// early stopping on the pooled held-out loss and the model is refit on all
/// of `rows`; otherwise `params.n_rounds` rounds are trained directly and
/// the curve holds training losses.
pub(crate) fn fit_ensemble<O: Objective>(
    x: &Matrix,
    cache: &FeatureCache,
    obj: &O,
    params: &BoostParams,
    rows: &[usize],
    strata: &[u64],
) -> Result<FitOutput> {
    params.validate()?;
    if rows.is_empty() {
        return Err(Error::InvalidData("no training rows".into()));
    }

    let chosen;
    let curve_losses;
    let from_cv;

    if let Some(cv) = &params.cv {
        if rows.len() < cv.folds {
            return Err(Error::InvalidData(format!(
                "{} rows cannot be split into {} folds",
                rows.len(),
                cv.folds
            )));
        }
        let fold_of = assign_folds(rows, strata, cv.folds, params.seed);
        let mut trainers = (0..cv.folds)
            .map(|f| {
                let train: Vec<usize> = rows
                    .iter()
                    .enumerate()
                    .filter(|(pos, _)| fold_of[*pos] != f)
                    .map(|(_, &r)| r)
                    .collect();
                let eval: Vec<usize> = rows
                    .iter()
                    .enumerate()
                    .filter(|(pos, _)| fold_of[*pos] == f)
                    .map(|(_, &r)| r)
                    .collect();
                RoundTrainer::new(x, cache, obj, params, f as u64, train, eval)
            })
            .collect::<Result<Vec<_>>>()?;

        let eval_weight: f64 = trainers.iter().map(|t| t.weight_over(&t.rows_eval)).sum();
        let pooled = |trainers: &[RoundTrainer<O>]| -> f64 {
            trainers
                .iter()
                .map(|t| t.loss_over(&t.rows_eval))
                .sum::<f64>()
                / eval_weight
        };

        let mut losses = vec![pooled(&trainers)];
        let mut best_round = 0usize;
        let mut best_loss = losses[0];
        for round in 1..=params.n_rounds {
            let step_results: Vec<Result<()>> = trainers
                .par_iter_mut()
                .map(|t| t.step(round - 1))
                .collect();
            for r in step_results {
                r?;
            }
            let l = pooled(&trainers);
            losses.push(l);
            if l < best_loss {
                best_loss = l;
                best_round = round;
            }
            if round - best_round >= cv.patience {
                break;
            }
        }
        chosen = best_round;
        curve_losses = losses;
        from_cv = true;
    } else {
        chosen = params.n_rounds;
        curve_losses = Vec::new();
        from_cv = false;
    }

    // Final model on all rows.
    let mut final_tr = RoundTrainer::new(
        x,
        cache,
        obj,
        params,
        FINAL_STREAM,
        rows.to_vec(),
        Vec::new(),
    )?;
    let train_weight = final_tr.weight_over(rows);
    let mut train_losses = vec![final_tr.loss_over(rows) / train_weight];
    for round in 0..chosen {
        final_tr.step(round)?;
        if !from_cv {
            train_losses.push(final_tr.loss_over(rows) / train_weight);
        }
    }

    let curve = DiagnosticCurve {
        losses: if from_cv { curve_losses } else { train_losses },
        chosen_round: chosen,
        from_cv,
    };
    let ensemble = Ensemble {
        trees: final_tr.trees,
        learning_rate: params.learning_rate,
        base: final_tr.base,
        n_features: x.n_cols(),
        loss: obj.kind(),
    };
    Ok(FitOutput {
        ensemble,
        curve,
        train_preds: final_tr.preds,
    })
}

/// Seed for the fit repeated inside permutation replicate `replicate`.
pub(crate) fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    derive_seed(seed, &[crate::seeding::STREAM_PERM_FIT, replicate])
}
