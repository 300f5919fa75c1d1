//! JSON configuration schemas. Every config rejects unknown keys so typos
//! fail loudly before any work starts.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Deserializer, Serialize};

use tsgbt::data::{CsvSchema, OutcomeKind};
use tsgbt::inference::StatKind;
use tsgbt::losses::Estimand;
use tsgbt::simgen::CovStructure;
use tsgbt::trees::BoostParams;

/// Fitting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Two-stage fit: augmentation ensemble, then effect ensemble.
    Tsgbt,
    /// Effect ensemble only, zero augmentation.
    Wgbt,
    /// Separate per-arm ensembles.
    Sgbt,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Tsgbt => write!(f, "tsgbt"),
            Mode::Wgbt => write!(f, "wgbt"),
            Mode::Sgbt => write!(f, "sgbt"),
        }
    }
}

/// Distinguishes an absent key (keep the stage default) from an explicit
/// `null` (disable cross-validation).
fn double_option<'de, T, D>(de: D) -> std::result::Result<Option<Option<T>>, D::Error>
where
    T: Deserialize<'de>,
    D: Deserializer<'de>,
{
    Deserialize::deserialize(de).map(Some)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOverride {
    pub folds: Option<usize>,
    pub patience: Option<usize>,
}

/// Partial boosting parameters; unset fields fall back to the stage default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostOverrides {
    pub n_rounds: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub max_depth: Option<usize>,
    pub min_child_weight: Option<f64>,
    pub subsample: Option<f64>,
    pub colsample: Option<f64>,
    #[serde(deserialize_with = "double_option")]
    pub cv: Option<Option<CvOverride>>,
}

impl BoostOverrides {
    pub fn resolve(&self, mut base: BoostParams) -> BoostParams {
        if let Some(v) = self.n_rounds {
            base.n_rounds = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.gamma {
            base.gamma = v;
        }
        if let Some(v) = self.lambda {
            base.lambda = v;
        }
        if let Some(v) = self.max_depth {
            base.max_depth = v;
        }
        if let Some(v) = self.min_child_weight {
            base.min_child_weight = v;
        }
        if let Some(v) = self.subsample {
            base.subsample = v;
        }
        if let Some(v) = self.colsample {
            base.colsample = v;
        }
        match &self.cv {
            None => {}
            Some(None) => base.cv = None,
            Some(Some(over)) => {
                let mut cv = base.cv.unwrap_or_default();
                if let Some(f) = over.folds {
                    cv.folds = f;
                }
                if let Some(p) = over.patience {
                    cv.patience = p;
                }
                base.cv = Some(cv);
            }
        }
        base
    }
}

fn default_p_treat() -> f64 {
    0.5
}

/// Configuration shared by `fit` and the fit step of `permtest`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub outcome_kind: OutcomeKind,
    #[serde(default)]
    pub estimand: Option<Estimand>,
    #[serde(default = "default_p_treat")]
    pub p_treat: f64,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub stage1: BoostOverrides,
    #[serde(default)]
    pub stage2: BoostOverrides,
    /// CSV file with an `a0` column: externally estimated augmentation
    /// values, one per training row. Skips stage 1.
    #[serde(default)]
    pub a0_file: Option<PathBuf>,
    /// Effect threshold for the reported "reduced" proportion; defaults to 1
    /// for risk ratios and 0 for mean differences.
    #[serde(default)]
    pub tau_threshold: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FitConfig {
    pub fn estimand(&self) -> Estimand {
        self.estimand
            .unwrap_or_else(|| tsgbt::twostage::default_estimand(self.outcome_kind))
    }

    pub fn stage1_params(&self, seed: u64) -> BoostParams {
        let mut p = self.stage1.resolve(BoostParams::stage1_defaults());
        p.seed = seed;
        p
    }

    pub fn stage2_params(&self, seed: u64) -> BoostParams {
        let mut p = self.stage2.resolve(BoostParams::stage2_defaults());
        p.seed = seed;
        p
    }
}

fn default_n_permutations() -> usize {
    200
}

fn default_stat_kind() -> StatKind {
    StatKind::Variance
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermtestConfig {
    pub fit: FitConfig,
    #[serde(default = "default_n_permutations")]
    pub n_permutations: usize,
    #[serde(default = "default_stat_kind")]
    pub stat_kind: StatKind,
    /// Report (1 + #exceedances)/(1 + B) instead of #/B.
    #[serde(default)]
    pub p_value_add_one: bool,
    /// Re-run round selection inside every replicate.
    #[serde(default)]
    pub retune: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub outcome_kind: OutcomeKind,
    /// `setting1`..`setting4` (continuous), `setting1`..`setting3` (binary),
    /// or `p1`..`p3` (null-effect calibration scenarios).
    pub design: String,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub cov_structure: Option<CovStructure>,
    #[serde(default)]
    pub p_treat: Option<f64>,
}

fn default_test_size() -> usize {
    1000
}

fn default_methods() -> Vec<Mode> {
    vec![Mode::Tsgbt, Mode::Wgbt, Mode::Sgbt]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Mode>,
    pub outcome_kind: OutcomeKind,
    pub design: String,
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub estimand: Option<Estimand>,
    #[serde(default)]
    pub stage1: BoostOverrides,
    #[serde(default)]
    pub stage2: BoostOverrides,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Build a simulation spec from a design name plus overrides.
#[allow(clippy::too_many_arguments)]
pub fn build_sim_spec(
    outcome_kind: OutcomeKind,
    design: &str,
    n: usize,
    p: usize,
    seed: u64,
    rho: Option<f64>,
    cov_structure: Option<CovStructure>,
    p_treat: Option<f64>,
) -> Result<tsgbt::simgen::SimSpec> {
    use tsgbt::simgen::{PermScenario, SimSpec};
    let mut spec = match (design, outcome_kind) {
        ("setting1", OutcomeKind::Continuous) => SimSpec::continuous_setting(1, n, p, seed),
        ("setting2", OutcomeKind::Continuous) => SimSpec::continuous_setting(2, n, p, seed),
        ("setting3", OutcomeKind::Continuous) => SimSpec::continuous_setting(3, n, p, seed),
        ("setting4", OutcomeKind::Continuous) => SimSpec::continuous_setting(4, n, p, seed),
        ("setting1", OutcomeKind::Binary) => SimSpec::binary_setting(1, n, p, seed),
        ("setting2", OutcomeKind::Binary) => SimSpec::binary_setting(2, n, p, seed),
        ("setting3", OutcomeKind::Binary) => SimSpec::binary_setting(3, n, p, seed),
        ("p1", kind) => SimSpec::permutation_scenario(PermScenario::P1, kind, n, p, seed),
        ("p2", kind) => SimSpec::permutation_scenario(PermScenario::P2, kind, n, p, seed),
        ("p3", kind) => SimSpec::permutation_scenario(PermScenario::P3, kind, n, p, seed),
        (other, kind) => bail!("unknown design '{other}' for {kind} outcomes"),
    }
    .with_context(|| format!("building design '{design}'"))?;
    if let Some(r) = rho {
        spec.rho = r;
    }
    if let Some(cs) = cov_structure {
        spec.cov_structure = cs;
    }
    if let Some(pt) = p_treat {
        spec.p_treat = pt;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
