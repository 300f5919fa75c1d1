//! The two-stage fitting procedure and its comparators.
//!
//! `fit_tsgbt` runs the full pipeline: a stage-1 ensemble for the main-effect
//! augmentation, the stage-1 transform into plug-in `a0` values, and a
//! stage-2 ensemble for the effect function under the augmented loss.
//! `fit_wgbt` is the stage-2-only comparator (`a0 = 0`), `fit_sgbt` fits the
//! two arms separately under standard losses, and `fit_with_external_a0`
//! accepts an augmentation vector estimated by any other method.
//!
//! Stage bases: stage 1 starts from the weighted outcome mean (continuous) or
//! the weighted log-odds (binary); stage 2 starts from the intercept-only
//! minimizer of its own loss, so a constant treatment effect is absorbed
//! before any tree is grown and the diagnostic curve of a no-heterogeneity
//! dataset is minimized at or near round zero. The intercept depends only on
//! (y, t, w, a0), all of which a covariate permutation leaves fixed, so the
//! permutation test is unaffected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boost::{
    fit_ensemble, FitOutput, Stage1Binary, Stage1Continuous, Stage2Binary, Stage2Continuous,
    Stage2Objective,
};
pub use crate::boost::DiagnosticCurve;
use crate::data::{Matrix, OutcomeKind, TrialDataset};
use crate::losses::{sigmoid, transform_hte, transform_stage1, Estimand, LossKind, LossSpec};
use crate::trees::{BoostParams, Ensemble, FeatureCache};
use crate::{Error, Result};

/// Where the stage-2 augmentation values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugSource {
    /// Fitted by the stage-1 ensemble stored in the model.
    Fitted,
    /// Supplied externally (any parametric or nonparametric estimator).
    External,
    /// Identically zero (the weighted, stage-2-only comparator).
    None,
}

/// A fitted two-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    pub estimand: Estimand,
    pub outcome_kind: OutcomeKind,
    pub a0_source: AugSource,
    pub stage1: Option<Ensemble>,
    pub stage2: Ensemble,
    pub params1: Option<BoostParams>,
    pub params2: BoostParams,
    pub feature_names: Vec<String>,
}

impl TwoStageModel {
    /// Effect estimate on the estimand scale: `2 F(x)` for mean difference,
    /// `exp(F(x))` for risk ratio.
    pub fn predict_hte(&self, x_row: &[f64]) -> Result<f64> {
        Ok(transform_hte(self.stage2.predict(x_row)?, self.estimand))
    }

    /// Recompute the plug-in augmentation value for a row. `None` when the
    /// augmentation was supplied externally and cannot be reproduced.
    pub fn predict_a0(&self, x_row: &[f64]) -> Result<Option<f64>> {
        match (self.a0_source, &self.stage1) {
            (AugSource::None, _) => Ok(Some(0.0)),
            (AugSource::Fitted, Some(s1)) => Ok(Some(transform_stage1(
                s1.predict(x_row)?,
                self.outcome_kind,
                self.estimand,
            )?)),
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s1) = &self.stage1 {
            s1.validate()?;
            if s1.n_features != self.stage2.n_features {
                return Err(Error::ModelFormat(
                    "stage-1 and stage-2 covariate dimensions differ".into(),
                ));
            }
        }
        self.stage2.validate()?;
        if self.feature_names.len() != self.stage2.n_features {
            return Err(Error::ModelFormat(format!(
                "{} feature names for {} covariates",
                self.feature_names.len(),
                self.stage2.n_features
            )));
        }
        Ok(())
    }
}

/// Full output of a two-stage fit: the model plus per-stage diagnostic
/// curves, the training-row augmentation values, and the training-row effect
/// estimates.
#[derive(Debug, Clone)]
pub struct TwoStageFit {
    pub model: TwoStageModel,
    pub stage1_curve: Option<DiagnosticCurve>,
    pub stage2_curve: DiagnosticCurve,
    pub a0: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Separate per-arm boosted fits; the effect estimate contrasts the two arm
/// predictions directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgbtModel {
    pub estimand: Estimand,
    pub outcome_kind: OutcomeKind,
    pub treated: Ensemble,
    pub control: Ensemble,
    pub params: BoostParams,
    pub feature_names: Vec<String>,
}

impl SgbtModel {
    pub fn predict_hte(&self, x_row: &[f64]) -> Result<f64> {
        let f1 = self.treated.predict(x_row)?;
        let f0 = self.control.predict(x_row)?;
        let (mu1, mu0) = match self.outcome_kind {
            OutcomeKind::Continuous => (f1, f0),
            OutcomeKind::Binary => (sigmoid(f1), sigmoid(f0)),
        };
        Ok(match self.estimand {
            Estimand::MeanDiff => mu1 - mu0,
            Estimand::RiskRatio => mu1 / mu0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.treated.validate()?;
        self.control.validate()?;
        if self.treated.n_features != self.control.n_features {
            return Err(Error::ModelFormat(
                "arm ensembles have different covariate dimensions".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgbtFit {
    pub model: SgbtModel,
    pub treated_curve: DiagnosticCurve,
    pub control_curve: DiagnosticCurve,
    pub tau: Vec<f64>,
}

/// Any model this crate can persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    TwoStage(TwoStageModel),
    Sgbt(SgbtModel),
}

impl ModelFile {
    pub fn predict_hte(&self, x_row: &[f64]) -> Result<f64> {
        match self {
            ModelFile::TwoStage(m) => m.predict_hte(x_row),
            ModelFile::Sgbt(m) => m.predict_hte(x_row),
        }
    }

    pub fn feature_names(&self) -> &[String] {
        match self {
            ModelFile::TwoStage(m) => &m.feature_names,
            ModelFile::Sgbt(m) => &m.feature_names,
        }
    }

    pub fn estimand(&self) -> Estimand {
        match self {
            ModelFile::TwoStage(m) => m.estimand,
            ModelFile::Sgbt(m) => m.estimand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelFile::TwoStage(m) => m.validate(),
            ModelFile::Sgbt(m) => m.validate(),
        }
    }
}

pub fn save_model(model: &ModelFile, path: &Path) -> Result<()> {
    let json = serde_json::to_string(model)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let json = std::fs::read_to_string(path)?;
    let model: ModelFile = serde_json::from_str(&json)?;
    model.validate()?;
    Ok(model)
}

/// The risk-ratio estimand only exists for binary outcomes.
pub fn validate_estimand(outcome_kind: OutcomeKind, estimand: Estimand) -> Result<()> {
    if estimand == Estimand::RiskRatio && outcome_kind == OutcomeKind::Continuous {
        return Err(Error::InvalidParam(
            "the risk-ratio estimand requires a binary outcome".into(),
        ));
    }
    Ok(())
}

/// Default estimand for an outcome kind: mean difference for continuous,
/// risk ratio for binary.
pub fn default_estimand(outcome_kind: OutcomeKind) -> Estimand {
    match outcome_kind {
        OutcomeKind::Continuous => Estimand::MeanDiff,
        OutcomeKind::Binary => Estimand::RiskRatio,
    }
}

/// CV-fold strata: treatment arm, crossed with the outcome for binary data
/// so every training set keeps events in both arms.
fn strata_for(data: &TrialDataset) -> Vec<u64> {
    (0..data.n())
        .map(|i| {
            let arm = u64::from(data.t()[i] == 1);
            match data.outcome_kind() {
                OutcomeKind::Continuous => arm,
                OutcomeKind::Binary => 2 * arm + u64::from(data.y()[i] == 1.0),
            }
        })
        .collect()
}

fn combined_weights(data: &TrialDataset) -> Vec<f64> {
    (0..data.n()).map(|i| data.combined_weight(i)).collect()
}

fn fit_stage1_impl(
    data: &TrialDataset,
    params: &BoostParams,
    cache: &FeatureCache,
) -> Result<FitOutput> {
    let rows: Vec<usize> = (0..data.n()).collect();
    let strata = strata_for(data);
    let w = combined_weights(data);
    match data.outcome_kind() {
        OutcomeKind::Continuous => {
            let obj = Stage1Continuous { y: data.y(), w };
            fit_ensemble(data.x(), cache, &obj, params, &rows, &strata)
        }
        OutcomeKind::Binary => {
            let obj = Stage1Binary { y: data.y(), w };
            fit_ensemble(data.x(), cache, &obj, params, &rows, &strata)
        }
    }
}

pub(crate) fn stage2_objective<'a>(
    data: &'a TrialDataset,
    a0: &'a [f64],
    estimand: Estimand,
    kind: LossKind,
) -> Stage2Objective<'a> {
    let w = combined_weights(data);
    match estimand {
        Estimand::MeanDiff => Stage2Objective::MeanDiff(Stage2Continuous {
            y: data.y(),
            t: data.t(),
            a0,
            w,
            kind,
        }),
        Estimand::RiskRatio => Stage2Objective::RiskRatio(Stage2Binary {
            y: data.y(),
            t: data.t(),
            a0,
            w,
            kind,
        }),
    }
}

fn stage2_kind(estimand: Estimand, augmented: bool) -> LossKind {
    match (estimand, augmented) {
        (Estimand::MeanDiff, true) => LossKind::Stage2Meandiff,
        (Estimand::MeanDiff, false) => LossKind::Stage2MeandiffNoaug,
        (Estimand::RiskRatio, true) => LossKind::Stage2Riskratio,
        (Estimand::RiskRatio, false) => LossKind::Stage2RiskratioNoaug,
    }
}

/// Stage-2 fit against an arbitrary covariate matrix (the permutation test
/// refits on row-permuted covariates while y, t, w, and a0 stay fixed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_stage2_on_matrix(
    x: &Matrix,
    cache: &FeatureCache,
    data: &TrialDataset,
    a0: &[f64],
    params: &BoostParams,
    estimand: Estimand,
    kind: LossKind,
) -> Result<FitOutput> {
    validate_estimand(data.outcome_kind(), estimand)?;
    if a0.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "a0 has {} entries for {} rows",
            a0.len(),
            data.n()
        )));
    }
    let rows: Vec<usize> = (0..data.n()).collect();
    let strata = strata_for(data);
    let obj = stage2_objective(data, a0, estimand, kind);
    fit_ensemble(x, cache, &obj, params, &rows, &strata)
}

/// Fit one boosted ensemble under a named loss; the generic entry point
/// behind the string identifiers accepted in configuration files.
pub fn fit_with_loss(
    data: &TrialDataset,
    spec: &LossSpec,
    params: &BoostParams,
) -> Result<(Ensemble, DiagnosticCurve)> {
    spec.validate_len(data.n())?;
    let cache = FeatureCache::build(data.x());
    let rows: Vec<usize> = (0..data.n()).collect();
    let strata = strata_for(data);
    let out = match spec.kind {
        LossKind::Stage1Mse => {
            let obj = Stage1Continuous {
                y: data.y(),
                w: combined_weights(data),
            };
            fit_ensemble(data.x(), &cache, &obj, params, &rows, &strata)?
        }
        LossKind::Stage1Logistic => {
            if data.outcome_kind() != OutcomeKind::Binary {
                return Err(Error::InvalidParam(
                    "stage1_logistic requires a binary outcome".into(),
                ));
            }
            let obj = Stage1Binary {
                y: data.y(),
                w: combined_weights(data),
            };
            fit_ensemble(data.x(), &cache, &obj, params, &rows, &strata)?
        }
        LossKind::Stage2Meandiff | LossKind::Stage2Riskratio => {
            let estimand = if spec.kind == LossKind::Stage2Meandiff {
                Estimand::MeanDiff
            } else {
                Estimand::RiskRatio
            };
            let a0 = spec.aug.as_deref().expect("validated augmented spec");
            fit_stage2_on_matrix(data.x(), &cache, data, a0, params, estimand, spec.kind)?
        }
        LossKind::Stage2MeandiffNoaug | LossKind::Stage2RiskratioNoaug => {
            let estimand = if spec.kind == LossKind::Stage2MeandiffNoaug {
                Estimand::MeanDiff
            } else {
                Estimand::RiskRatio
            };
            let zeros = vec![0.0; data.n()];
            fit_stage2_on_matrix(data.x(), &cache, data, &zeros, params, estimand, spec.kind)?
        }
    };
    Ok((out.ensemble, out.curve))
}

/// Fit the stage-1 (main effect) ensemble under the weighted squared-error
/// or logistic loss; returns the ensemble and its diagnostic curve.
pub fn fit_stage1(data: &TrialDataset, params: &BoostParams) -> Result<(Ensemble, DiagnosticCurve)> {
    let cache = FeatureCache::build(data.x());
    let out = fit_stage1_impl(data, params, &cache)?;
    Ok((out.ensemble, out.curve))
}

/// Fit the stage-2 (effect) ensemble with the given augmentation values.
pub fn fit_stage2(
    data: &TrialDataset,
    a0: &[f64],
    params: &BoostParams,
    estimand: Estimand,
) -> Result<(Ensemble, DiagnosticCurve)> {
    let cache = FeatureCache::build(data.x());
    let out = fit_stage2_on_matrix(
        data.x(),
        &cache,
        data,
        a0,
        params,
        estimand,
        stage2_kind(estimand, true),
    )?;
    Ok((out.ensemble, out.curve))
}

#[allow(clippy::too_many_arguments)]
fn finish_two_stage(
    data: &TrialDataset,
    s2: FitOutput,
    estimand: Estimand,
    a0: Vec<f64>,
    a0_source: AugSource,
    stage1: Option<Ensemble>,
    stage1_curve: Option<DiagnosticCurve>,
    params1: Option<BoostParams>,
    params2: &BoostParams,
) -> TwoStageFit {
    // report effects through the same prediction path a saved model uses
    let tau: Vec<f64> = (0..data.n())
        .map(|i| transform_hte(s2.ensemble.predict_unchecked(data.x().row(i)), estimand))
        .collect();
    TwoStageFit {
        model: TwoStageModel {
            estimand,
            outcome_kind: data.outcome_kind(),
            a0_source,
            stage1,
            stage2: s2.ensemble,
            params1,
            params2: params2.clone(),
            feature_names: data.feature_names().to_vec(),
        },
        stage1_curve,
        stage2_curve: s2.curve,
        a0,
        tau,
    }
}

/// The full two-stage procedure: stage-1 fit, stage-1 transform, stage-2 fit.
pub fn fit_tsgbt(
    data: &TrialDataset,
    params1: &BoostParams,
    params2: &BoostParams,
    estimand: Estimand,
) -> Result<TwoStageFit> {
    validate_estimand(data.outcome_kind(), estimand)?;
    let cache = FeatureCache::build(data.x());
    let s1 = fit_stage1_impl(data, params1, &cache)?;
    let a0: Vec<f64> = (0..data.n())
        .map(|i| transform_stage1(s1.train_preds[i], data.outcome_kind(), estimand))
        .collect::<Result<_>>()?;
    let s2 = fit_stage2_on_matrix(
        data.x(),
        &cache,
        data,
        &a0,
        params2,
        estimand,
        stage2_kind(estimand, true),
    )?;
    Ok(finish_two_stage(
        data,
        s2,
        estimand,
        a0,
        AugSource::Fitted,
        Some(s1.ensemble),
        Some(s1.curve),
        Some(params1.clone()),
        params2,
    ))
}

/// Stage 2 with an externally estimated augmentation vector; stage 1 is
/// skipped entirely.
pub fn fit_with_external_a0(
    data: &TrialDataset,
    a0: &[f64],
    params2: &BoostParams,
    estimand: Estimand,
) -> Result<TwoStageFit> {
    let cache = FeatureCache::build(data.x());
    let s2 = fit_stage2_on_matrix(
        data.x(),
        &cache,
        data,
        a0,
        params2,
        estimand,
        stage2_kind(estimand, true),
    )?;
    Ok(finish_two_stage(
        data,
        s2,
        estimand,
        a0.to_vec(),
        AugSource::External,
        None,
        None,
        None,
        params2,
    ))
}

/// Weighted stage-2-only comparator: identical to the second stage of
/// `fit_tsgbt` with `a0 = 0`.
pub fn fit_wgbt(
    data: &TrialDataset,
    params2: &BoostParams,
    estimand: Estimand,
) -> Result<TwoStageFit> {
    let cache = FeatureCache::build(data.x());
    let a0 = vec![0.0; data.n()];
    let s2 = fit_stage2_on_matrix(
        data.x(),
        &cache,
        data,
        &a0,
        params2,
        estimand,
        stage2_kind(estimand, false),
    )?;
    Ok(finish_two_stage(
        data,
        s2,
        estimand,
        a0,
        AugSource::None,
        None,
        None,
        None,
        params2,
    ))
}

/// Separate fits per treatment arm under the standard (unweighted by
/// randomization) loss; sampling weights still apply.
pub fn fit_sgbt(
    data: &TrialDataset,
    params: &BoostParams,
    estimand: Estimand,
) -> Result<SgbtFit> {
    validate_estimand(data.outcome_kind(), estimand)?;
    let cache = FeatureCache::build(data.x());
    let strata: Vec<u64> = (0..data.n())
        .map(|i| match data.outcome_kind() {
            OutcomeKind::Continuous => 0,
            OutcomeKind::Binary => u64::from(data.y()[i] == 1.0),
        })
        .collect();
    let fit_arm = |arm: i8| -> Result<FitOutput> {
        let rows = data.arm_rows(arm);
        if rows.is_empty() {
            return Err(Error::InvalidData(format!("treatment arm {arm} is empty")));
        }
        let w: Vec<f64> = (0..data.n()).map(|i| data.w_sample()[i]).collect();
        match data.outcome_kind() {
            OutcomeKind::Continuous => {
                let obj = Stage1Continuous { y: data.y(), w };
                fit_ensemble(data.x(), &cache, &obj, params, &rows, &strata)
            }
            OutcomeKind::Binary => {
                let obj = Stage1Binary { y: data.y(), w };
                fit_ensemble(data.x(), &cache, &obj, params, &rows, &strata)
            }
        }
    };
    let treated = fit_arm(1)?;
    let control = fit_arm(-1)?;
    let model = SgbtModel {
        estimand,
        outcome_kind: data.outcome_kind(),
        treated: treated.ensemble,
        control: control.ensemble,
        params: params.clone(),
        feature_names: data.feature_names().to_vec(),
    };
    let tau: Vec<f64> = (0..data.n())
        .map(|i| model.predict_hte(data.x().row(i)))
        .collect::<Result<_>>()?;
    Ok(SgbtFit {
        model,
        treated_curve: treated.curve,
        control_curve: control.curve,
        tau,
    })
}
