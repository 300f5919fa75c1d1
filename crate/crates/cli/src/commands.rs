//! Subcommand implementations and artifact writing.
//!
//! Every run writes its artifacts into the output directory and then
//! re-reads them for validation; the process exits nonzero unless all
//! requested artifacts were written and validated.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use tsgbt::data::{load_column, load_covariates, load_csv, TrialDataset};
use tsgbt::inference::{permutation_test, PermutationConfig, PermutationResult};
use tsgbt::losses::Estimand;
use tsgbt::metrics::{mse_scale, spearman, variable_importance, ImportanceReport};
use tsgbt::simgen::generate;
use tsgbt::trees::{BoostParams, Ensemble};
use tsgbt::twostage::{
    fit_sgbt, fit_tsgbt, fit_wgbt, fit_with_external_a0, load_model, save_model, AugSource,
    DiagnosticCurve, ModelFile, TwoStageFit,
};

use crate::config::{
    build_sim_spec, BenchmarkConfig, FitConfig, Mode, PermtestConfig, SimulateConfig,
};

pub struct CommonArgs {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

fn load_dataset(cfg: &FitConfig, args: &CommonArgs) -> Result<TrialDataset> {
    let path = args
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .context("no dataset: pass --data or set \"data\" in the config")?;
    load_csv(&path, &cfg.schema, cfg.p_treat, cfg.outcome_kind)
        .with_context(|| format!("loading {}", path.display()))
}

fn resolved_seed(cfg_seed: Option<u64>, args: &CommonArgs) -> u64 {
    args.seed.or(cfg_seed).unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &DiagnosticCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "loss"])?;
    for (round, loss) in curve.losses.iter().enumerate() {
        w.write_record([round.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_tau_csv(path: &Path, tau: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tau"])?;
    for v in tau {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_importance_csv(path: &Path, report: &ImportanceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "raw_gain", "relative"])?;
    for e in &report.entries {
        w.write_record([
            e.feature.clone(),
            e.raw_gain.to_string(),
            e.relative.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn count_csv_rows(path: &Path) -> Result<usize> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut n = 0;
    for rec in rdr.records() {
        rec?;
        n += 1;
    }
    Ok(n)
}

#[derive(Serialize)]
struct TauSummary {
    min: f64,
    p25: f64,
    median: f64,
    p75: f64,
    max: f64,
    mean: f64,
}

impl TauSummary {
    fn from(tau: &[f64]) -> Self {
        let mut s = tau.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).expect("finite effects"));
        let q = |f: f64| -> f64 {
            // linear interpolation between order statistics
            let pos = f * (s.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        Self {
            min: s[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: s[s.len() - 1],
            mean: tau.iter().sum::<f64>() / tau.len() as f64,
        }
    }
}

#[derive(Serialize)]
struct ThresholdSummary {
    value: f64,
    comparison: &'static str,
    proportion: f64,
}

#[derive(Serialize)]
struct FitSummary {
    n: usize,
    p: usize,
    mode: String,
    outcome_kind: String,
    estimand: String,
    seed: u64,
    a0_source: String,
    stage1_rounds: Option<usize>,
    stage2_rounds: usize,
    tau: TauSummary,
    reduced_effect: ThresholdSummary,
}

enum FitOutcome {
    TwoStage(TwoStageFit),
    Sgbt(tsgbt::twostage::SgbtFit),
}

fn run_fit(cfg: &FitConfig, data: &TrialDataset, seed: u64, mode: Mode) -> Result<FitOutcome> {
    let estimand = cfg.estimand();
    let params2 = cfg.stage2_params(seed);
    Ok(match (mode, &cfg.a0_file) {
        (Mode::Tsgbt, Some(path)) => {
            let a0 = load_column(path, "a0")
                .with_context(|| format!("loading external a0 from {}", path.display()))?;
            FitOutcome::TwoStage(fit_with_external_a0(data, &a0, &params2, estimand)?)
        }
        (Mode::Tsgbt, None) => {
            let params1 = cfg.stage1_params(seed);
            FitOutcome::TwoStage(fit_tsgbt(data, &params1, &params2, estimand)?)
        }
        (Mode::Wgbt, _) => FitOutcome::TwoStage(fit_wgbt(data, &params2, estimand)?),
        (Mode::Sgbt, _) => FitOutcome::Sgbt(fit_sgbt(data, &params2, estimand)?),
    })
}

pub fn cmd_fit(config_path: &Path, args: &CommonArgs, mode_flag: Option<Mode>) -> Result<()> {
    let cfg: FitConfig = crate::config::load_config(config_path)?;
    let data = load_dataset(&cfg, args)?;
    let seed = resolved_seed(cfg.seed, args);
    let mode = mode_flag.or(cfg.mode).unwrap_or(Mode::Tsgbt);
    let estimand = cfg.estimand();
    ensure_out_dir(&args.out)?;

    let outcome = run_fit(&cfg, &data, seed, mode)?;
    type NamedCurves = Vec<(&'static str, DiagnosticCurve)>;
    let (model_file, tau, importance, curves): (ModelFile, Vec<f64>, ImportanceReport, NamedCurves) =
        match outcome {
        FitOutcome::TwoStage(fit) => {
            let importance = variable_importance(&fit.model.stage2, data.feature_names())?;
            let mut curves = Vec::new();
            if let Some(c) = fit.stage1_curve.clone() {
                curves.push(("stage1_curve.csv", c));
            }
            curves.push(("stage2_curve.csv", fit.stage2_curve.clone()));
            (
                ModelFile::TwoStage(fit.model),
                fit.tau,
                importance,
                curves,
            )
        }
        FitOutcome::Sgbt(fit) => {
            // gains pooled over both arm ensembles
            let combined = Ensemble {
                trees: fit
                    .model
                    .treated
                    .trees
                    .iter()
                    .chain(fit.model.control.trees.iter())
                    .cloned()
                    .collect(),
                learning_rate: fit.model.treated.learning_rate,
                base: 0.0,
                n_features: fit.model.treated.n_features,
                loss: fit.model.treated.loss,
            };
            let importance = variable_importance(&combined, data.feature_names())?;
            let curves = vec![
                ("treated_curve.csv", fit.treated_curve.clone()),
                ("control_curve.csv", fit.control_curve.clone()),
            ];
            (ModelFile::Sgbt(fit.model), fit.tau, importance, curves)
        }
    };

    let threshold = cfg.tau_threshold.unwrap_or(match estimand {
        Estimand::RiskRatio => 1.0,
        Estimand::MeanDiff => 0.0,
    });
    let below = tau.iter().filter(|&&v| v < threshold).count();
    let (stage1_rounds, stage2_rounds, a0_source) = match &model_file {
        ModelFile::TwoStage(m) => (
            m.stage1.as_ref().map(|e| e.n_rounds()),
            m.stage2.n_rounds(),
            match m.a0_source {
                AugSource::Fitted => "fitted".to_string(),
                AugSource::External => format!(
                    "external:{}",
                    cfg.a0_file.as_deref().unwrap_or(Path::new("?")).display()
                ),
                AugSource::None => "none".to_string(),
            },
        ),
        ModelFile::Sgbt(m) => (
            Some(m.treated.n_rounds()),
            m.control.n_rounds(),
            "per_arm".to_string(),
        ),
    };
    let summary = FitSummary {
        n: data.n(),
        p: data.n_features(),
        mode: mode.to_string(),
        outcome_kind: data.outcome_kind().to_string(),
        estimand: estimand.to_string(),
        seed,
        a0_source,
        stage1_rounds,
        stage2_rounds,
        tau: TauSummary::from(&tau),
        reduced_effect: ThresholdSummary {
            value: threshold,
            comparison: "less_than",
            proportion: below as f64 / tau.len() as f64,
        },
    };

    let model_path = args.out.join("model.json");
    save_model(&model_file, &model_path)?;
    write_tau_csv(&args.out.join("tau.csv"), &tau)?;
    for (name, curve) in &curves {
        write_curve_csv(&args.out.join(name), curve)?;
    }
    write_importance_csv(&args.out.join("importance.csv"), &importance)?;
    write_json(&args.out.join("summary.json"), &summary)?;

    // validation pass over everything just written
    load_model(&model_path)?;
    if count_csv_rows(&args.out.join("tau.csv"))? != data.n() {
        bail!("tau.csv row count does not match the dataset");
    }
    let _: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(args.out.join("summary.json"))?)?;

    println!(
        "fit: mode={mode} n={} p={} rounds={}{} median_tau={:.6} reduced={:.4}",
        data.n(),
        data.n_features(),
        stage1_rounds.map_or(String::from("-"), |r| format!("{r}/")),
        stage2_rounds,
        summary.tau.median,
        summary.reduced_effect.proportion,
    );
    Ok(())
}

pub fn cmd_predict(model_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let x = load_covariates(data_path, model.feature_names())?;
    ensure_out_dir(out)?;
    let tau: Vec<f64> = (0..x.n_rows())
        .map(|i| model.predict_hte(x.row(i)))
        .collect::<tsgbt::Result<_>>()?;
    write_tau_csv(&out.join("tau.csv"), &tau)?;
    if count_csv_rows(&out.join("tau.csv"))? != x.n_rows() {
        bail!("tau.csv row count does not match the input");
    }
    println!("predict: {} rows -> {}", x.n_rows(), out.join("tau.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct PermSummary {
    observed_stat: f64,
    p_value: f64,
    n_permutations: usize,
    stat_kind: String,
    seed: u64,
    add_one: bool,
    retune: bool,
    stage2_rounds: usize,
}

pub fn cmd_permtest(
    config_path: &Path,
    args: &CommonArgs,
    model_path: Option<&Path>,
) -> Result<()> {
    let cfg: PermtestConfig = crate::config::load_config(config_path)?;
    let data = load_dataset(&cfg.fit, args)?;
    let seed = resolved_seed(cfg.fit.seed, args);
    let estimand = cfg.fit.estimand();
    ensure_out_dir(&args.out)?;

    // observed fit: reuse a saved model or fit from scratch
    let (a0, observed_tau, mut params2): (Vec<f64>, Vec<f64>, BoostParams) = match model_path {
        Some(path) => {
            let model = match load_model(path)? {
                ModelFile::TwoStage(m) => m,
                ModelFile::Sgbt(_) => {
                    bail!("the permutation test needs a two-stage model, not per-arm fits")
                }
            };
            let mut a0 = Vec::with_capacity(data.n());
            for i in 0..data.n() {
                match model.predict_a0(data.x().row(i))? {
                    Some(v) => a0.push(v),
                    None => bail!(
                        "model was fit with an external a0; rerun with the a0_file config instead"
                    ),
                }
            }
            let tau: Vec<f64> = (0..data.n())
                .map(|i| model.predict_hte(data.x().row(i)))
                .collect::<tsgbt::Result<_>>()?;
            let mut params = model.params2.clone();
            params.n_rounds = model.stage2.n_rounds();
            (a0, tau, params)
        }
        None => {
            let mode = cfg.fit.mode.unwrap_or(Mode::Tsgbt);
            if mode == Mode::Sgbt {
                bail!("the permutation test applies to tsgbt/wgbt fits, not sgbt");
            }
            match run_fit(&cfg.fit, &data, seed, mode)? {
                FitOutcome::TwoStage(fit) => {
                    let mut params = fit.model.params2.clone();
                    params.n_rounds = fit.model.stage2.n_rounds();
                    (fit.a0, fit.tau, params)
                }
                FitOutcome::Sgbt(_) => unreachable!("sgbt rejected above"),
            }
        }
    };
    if !cfg.retune {
        params2.cv = None;
    }
    params2.seed = seed;

    let perm_cfg = PermutationConfig {
        n_permutations: cfg.n_permutations,
        stat_kind: cfg.stat_kind,
        seed,
        add_one: cfg.p_value_add_one,
        retune: cfg.retune,
    };
    let result: PermutationResult =
        permutation_test(&data, &a0, &observed_tau, &params2, estimand, &perm_cfg)?;

    let summary = PermSummary {
        observed_stat: result.observed_stat,
        p_value: result.p_value,
        n_permutations: result.n_permutations,
        stat_kind: result.stat_kind.to_string(),
        seed,
        add_one: result.add_one,
        retune: cfg.retune,
        stage2_rounds: params2.n_rounds,
    };
    write_json(&args.out.join("permutation.json"), &summary)?;
    let stats_path = args.out.join("perm_stats.csv");
    let mut w = csv::Writer::from_path(&stats_path)?;
    w.write_record(["stat"])?;
    for s in &result.perm_stats {
        w.write_record([s.to_string()])?;
    }
    w.flush()?;

    if count_csv_rows(&stats_path)? != cfg.n_permutations {
        bail!("perm_stats.csv row count does not match n_permutations");
    }
    let _: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(args.out.join("permutation.json"))?)?;

    println!(
        "permtest: stat={} observed={:.6e} B={} p={:.4}",
        result.stat_kind, result.observed_stat, result.n_permutations, result.p_value
    );
    Ok(())
}

pub fn cmd_simulate(config_path: &Path, args: &CommonArgs) -> Result<()> {
    let cfg: SimulateConfig = crate::config::load_config(config_path)?;
    let seed = resolved_seed(cfg.seed, args);
    let spec = build_sim_spec(
        cfg.outcome_kind,
        &cfg.design,
        cfg.n,
        cfg.p,
        seed,
        cfg.rho,
        cfg.cov_structure,
        cfg.p_treat,
    )?;
    ensure_out_dir(&args.out)?;
    let gen = generate(&spec)?;

    let data_path = args.out.join("data.csv");
    let file = std::fs::File::create(&data_path)?;
    gen.write_csv(file)?;
    let spec_path = args.out.join("sim_spec.json");
    write_json(&spec_path, &spec)?;

    // the echoed spec must round-trip through its own schema
    let echoed: tsgbt::simgen::SimSpec =
        serde_json::from_str(&std::fs::read_to_string(&spec_path)?)?;
    if echoed != spec {
        bail!("echoed simulation spec does not round-trip");
    }
    if count_csv_rows(&data_path)? != cfg.n {
        bail!("data.csv row count does not match n");
    }

    match gen.prevalence() {
        Some(prev) => println!(
            "simulate: {} n={} p={} prevalence={:.4} -> {}",
            spec.label,
            cfg.n,
            cfg.p,
            prev,
            data_path.display()
        ),
        None => println!(
            "simulate: {} n={} p={} -> {}",
            spec.label,
            cfg.n,
            cfg.p,
            data_path.display()
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    method: String,
    median_scorr: f64,
    median_mse: f64,
}

#[derive(Serialize)]
struct BenchmarkSummary {
    design: String,
    outcome_kind: String,
    estimand: String,
    n: usize,
    p: usize,
    replicates: usize,
    test_size: usize,
    seed: u64,
    methods: Vec<MethodSummary>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_benchmark(config_path: &Path, args: &CommonArgs) -> Result<()> {
    let cfg: BenchmarkConfig = crate::config::load_config(config_path)?;
    if cfg.methods.is_empty() {
        bail!("no methods requested");
    }
    if cfg.replicates == 0 {
        bail!("at least one replicate is required");
    }
    let seed = resolved_seed(cfg.seed, args);
    let estimand = cfg
        .estimand
        .unwrap_or_else(|| tsgbt::twostage::default_estimand(cfg.outcome_kind));
    ensure_out_dir(&args.out)?;

    use rayon::prelude::*;
    type EffectFn = Box<dyn Fn(&[f64]) -> tsgbt::Result<f64>>;
    let rows: Vec<(usize, Mode, f64, f64)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| -> Result<Vec<(usize, Mode, f64, f64)>> {
            let train_spec = build_sim_spec(
                cfg.outcome_kind,
                &cfg.design,
                cfg.n,
                cfg.p,
                seed.wrapping_add(1 + 2 * rep as u64),
                None,
                None,
                None,
            )?;
            let test_spec = build_sim_spec(
                cfg.outcome_kind,
                &cfg.design,
                cfg.test_size,
                cfg.p,
                seed.wrapping_add(2 + 2 * rep as u64),
                None,
                None,
                None,
            )?;
            let train = generate(&train_spec)?;
            let test = generate(&test_spec)?;
            let mut out = Vec::new();
            for &method in &cfg.methods {
                let fit_seed = seed.wrapping_add(rep as u64);
                let stage1 = {
                    let mut p = cfg.stage1.resolve(BoostParams::stage1_defaults());
                    p.seed = fit_seed;
                    p
                };
                let stage2 = {
                    let mut p = cfg.stage2.resolve(BoostParams::stage2_defaults());
                    p.seed = fit_seed;
                    p
                };
                let predict: EffectFn = match method {
                    Mode::Tsgbt => {
                        let fit = fit_tsgbt(&train.dataset, &stage1, &stage2, estimand)?;
                        Box::new(move |row| fit.model.predict_hte(row))
                    }
                    Mode::Wgbt => {
                        let fit = fit_wgbt(&train.dataset, &stage2, estimand)?;
                        Box::new(move |row| fit.model.predict_hte(row))
                    }
                    Mode::Sgbt => {
                        let fit = fit_sgbt(&train.dataset, &stage2, estimand)?;
                        Box::new(move |row| fit.model.predict_hte(row))
                    }
                };
                let tau_hat: Vec<f64> = (0..test.dataset.n())
                    .map(|i| predict(test.dataset.x().row(i)))
                    .collect::<tsgbt::Result<_>>()?;
                let sc = spearman(&tau_hat, &test.true_tau)?;
                let mse = mse_scale(&tau_hat, &test.true_tau, estimand)?;
                out.push((rep, method, sc, mse));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let csv_path = args.out.join("replicates.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["replicate", "method", "scorr", "mse"])?;
    for (rep, method, sc, mse) in &rows {
        w.write_record([
            rep.to_string(),
            method.to_string(),
            sc.to_string(),
            mse.to_string(),
        ])?;
    }
    w.flush()?;

    let mut methods = Vec::new();
    for &method in &cfg.methods {
        let mut scs: Vec<f64> = rows
            .iter()
            .filter(|r| r.1 == method)
            .map(|r| r.2)
            .collect();
        let mut mses: Vec<f64> = rows
            .iter()
            .filter(|r| r.1 == method)
            .map(|r| r.3)
            .collect();
        methods.push(MethodSummary {
            method: method.to_string(),
            median_scorr: median(&mut scs),
            median_mse: median(&mut mses),
        });
    }
    let summary = BenchmarkSummary {
        design: cfg.design.clone(),
        outcome_kind: cfg.outcome_kind.to_string(),
        estimand: estimand.to_string(),
        n: cfg.n,
        p: cfg.p,
        replicates: cfg.replicates,
        test_size: cfg.test_size,
        seed,
        methods,
    };
    write_json(&args.out.join("benchmark.json"), &summary)?;

    if count_csv_rows(&csv_path)? != cfg.replicates * cfg.methods.len() {
        bail!("replicates.csv row count mismatch");
    }
    for m in &summary.methods {
        println!(
            "benchmark: {} median sCORR={:.4} median MSE={:.4}",
            m.method, m.median_scorr, m.median_mse
        );
    }
    Ok(())
}
