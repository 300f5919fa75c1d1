//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criteria with a Monte Carlo component use fixed seeds, so outcomes are
//! reproducible bit-for-bit. The full-scale calibration run backing
//! criterion 6 is `criterion6_full_calibration` (ignored by default; run
//! with `-- --ignored`); the in-suite version is the mandated smoke scale.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tsgbt::data::{Matrix, OutcomeKind, TrialDataset};
use tsgbt::inference::{permutation_test, PermutationConfig, StatKind};
use tsgbt::losses::{
    grad_hess_stage1_binary, grad_hess_stage1_continuous, grad_hess_stage2_binary,
    grad_hess_stage2_continuous, loss_stage1_binary, loss_stage1_continuous,
    loss_stage2_binary, loss_stage2_continuous, optimal_aug_general, Estimand,
};
use tsgbt::metrics::mse_scale;
use tsgbt::simgen::{generate, solve_risk_pair, PermScenario, SimSpec};
use tsgbt::trees::{BoostParams, CvParams, Ensemble};
use tsgbt::twostage::{default_estimand, fit_sgbt, fit_stage2, fit_tsgbt, fit_wgbt};

fn report(criterion: &str, pass: bool, detail: &str) -> bool {
    println!(
        "[criterion {criterion}] {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

#[allow(clippy::too_many_arguments)]
fn bp(
    n_rounds: usize,
    learning_rate: f64,
    gamma: f64,
    max_depth: usize,
    min_child_weight: f64,
    subsample: f64,
    colsample: f64,
    cv: Option<CvParams>,
) -> BoostParams {
    BoostParams {
        n_rounds,
        learning_rate,
        gamma,
        lambda: 1.0,
        max_depth,
        min_child_weight,
        subsample,
        colsample,
        seed: 0,
        cv,
    }
}

fn cv(folds: usize, patience: usize) -> Option<CvParams> {
    Some(CvParams { folds, patience })
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient/hessian pairs match finite differences of their loss
// summands to 1e-6 relative tolerance over 1000 random inputs each, < 1 s.
// ---------------------------------------------------------------------------

#[test]
fn criterion1_gradient_correctness() {
    let start = std::time::Instant::now();
    let eps = 2f64.powi(-10);
    let fd = |f: &dyn Fn(f64) -> f64, at: f64| -> (f64, f64) {
        let (fm, f0, fp) = (f(at - eps), f(at), f(at + eps));
        ((fp - fm) / (2.0 * eps), (fp - 2.0 * f0 + fm) / (eps * eps))
    };
    let close = |got: f64, want: f64| (got - want).abs() <= 1e-6 * want.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..1000 {
        let w = rng.random_range(0.2..5.0);
        let t: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        let yb = f64::from(rng.random_bool(0.5));
        let yc = rng.random_range(-3.0..3.0);
        let a = rng.random_range(-3.0..3.0);
        let a0 = rng.random_range(-0.9..0.9);
        let f = rng.random_range(-2.0..2.0);

        let cases: [((f64, f64), (f64, f64)); 4] = [
            (
                grad_hess_stage1_continuous(yc, a, w),
                fd(&|v| loss_stage1_continuous(yc, v, w), a),
            ),
            (
                grad_hess_stage1_binary(yb, a, w),
                fd(&|v| loss_stage1_binary(yb, v, w), a),
            ),
            (
                grad_hess_stage2_continuous(yc, a0, f, t, w),
                fd(&|v| loss_stage2_continuous(yc, a0, v, t, w), f),
            ),
            (
                grad_hess_stage2_binary(yb, a0, f, t, w),
                fd(&|v| loss_stage2_binary(yb, a0, v, t, w), f),
            ),
        ];
        for ((g, h), (fd_g, fd_h)) in cases {
            ok &= close(g, fd_g) && close(h, fd_h);
            worst = worst
                .max((g - fd_g).abs() / fd_g.abs().max(1.0))
                .max((h - fd_h).abs() / fd_h.abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    let pass = ok && elapsed.as_secs_f64() < 1.0;
    assert!(report(
        "1",
        pass,
        &format!(
            "4 losses x 1000 draws, worst relative deviation {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 2: boosted stage-2 cell estimates match the weighted cell-wise
// mean-difference / log-risk-ratio oracles on two-cell designs, at
// p_treat in {0.5, 0.25}; tolerances 1e-2 and 5%, < 30 s.
// ---------------------------------------------------------------------------

fn weighted_cell_arm_mean(data: &TrialDataset, cell: f64, arm: i8) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..data.n() {
        if data.x().get(i, 0) == cell && data.t()[i] == arm {
            let w = data.combined_weight(i);
            num += w * data.y()[i];
            den += w;
        }
    }
    num / den
}

fn newton_params(n_rounds: usize, learning_rate: f64) -> BoostParams {
    BoostParams {
        n_rounds,
        learning_rate,
        gamma: 0.0,
        lambda: 0.0,
        max_depth: 1,
        min_child_weight: 0.0,
        subsample: 1.0,
        colsample: 1.0,
        seed: 0,
        cv: None,
    }
}

#[test]
fn criterion2_closed_form_recovery() {
    let start = std::time::Instant::now();
    let mut pass = true;
    let mut details = Vec::new();

    for p_treat in [0.5, 0.25] {
        // continuous two-cell design: tau = (1.0, -0.5), small main effects
        let mut rng = ChaCha8Rng::seed_from_u64(207);
        let n = 5000;
        let (mut rows, mut y, mut t, mut a0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let cell = f64::from(rng.random_bool(0.5));
            let (main, tau) = if cell == 0.0 { (0.05, 1.0) } else { (-0.025, -0.5) };
            let ti: i8 = if rng.random_bool(p_treat) { 1 } else { -1 };
            let eps: f64 = rng.random_range(-0.17..0.17);
            rows.push(vec![cell]);
            y.push(main + tau / 2.0 * f64::from(ti) + eps);
            t.push(ti);
            a0.push(main);
        }
        let data = TrialDataset::new(
            y,
            t,
            Matrix::from_rows(rows).unwrap(),
            p_treat,
            None,
            OutcomeKind::Continuous,
            None,
        )
        .unwrap();
        let (ens, _) = fit_stage2(&data, &a0, &newton_params(60, 1.0), Estimand::MeanDiff).unwrap();
        for cell in [0.0, 1.0] {
            let oracle =
                weighted_cell_arm_mean(&data, cell, 1) - weighted_cell_arm_mean(&data, cell, -1);
            let est = 2.0 * ens.predict(&[cell]).unwrap();
            pass &= (est - oracle).abs() < 1e-2;
            details.push(format!(
                "cont p={p_treat} cell{cell}: |{est:.4} - {oracle:.4}| = {:.1e}",
                (est - oracle).abs()
            ));
        }

        // binary two-cell design: risk ratios (2.0, 1.0)
        let mut rng = ChaCha8Rng::seed_from_u64(209);
        let n = 20_000;
        let (mut rows, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let cell = f64::from(rng.random_bool(0.5));
            let ti: i8 = if rng.random_bool(p_treat) { 1 } else { -1 };
            let rate = match (cell == 0.0, ti == 1) {
                (true, true) => 0.4,
                (true, false) => 0.2,
                (false, _) => 0.3,
            };
            rows.push(vec![cell]);
            y.push(f64::from(rng.random_bool(rate)));
            t.push(ti);
        }
        let data = TrialDataset::new(
            y,
            t,
            Matrix::from_rows(rows).unwrap(),
            p_treat,
            None,
            OutcomeKind::Binary,
            None,
        )
        .unwrap();
        let a0 = vec![0.4; n]; // 1 - (mu1 + mu-1) is 0.4 in both cells
        let (ens, _) =
            fit_stage2(&data, &a0, &newton_params(300, 0.5), Estimand::RiskRatio).unwrap();
        for cell in [0.0, 1.0] {
            let oracle =
                weighted_cell_arm_mean(&data, cell, 1) / weighted_cell_arm_mean(&data, cell, -1);
            let est = ens.predict(&[cell]).unwrap().exp();
            pass &= (est / oracle - 1.0).abs() < 0.05;
            details.push(format!(
                "bin p={p_treat} cell{cell}: {est:.4} vs {oracle:.4} ({:.2}%)",
                100.0 * (est / oracle - 1.0).abs()
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 30.0;
    assert!(report(
        "2",
        pass,
        &format!("{}; {elapsed:.1}s", details.join("; ")),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 3: the general optimal augmentation collapses to (mu1+mu0)/2
// (mean difference) and 1-(mu1+mu0) (risk ratio) on a 9-point p grid, 1e-12.
// ---------------------------------------------------------------------------

#[test]
fn criterion3_augmentation_identities() {
    let mut worst: f64 = 0.0;
    for &(mu1, mu0) in &[(0.62, 0.21), (0.9, 0.05), (0.35, 0.34), (0.11, 0.48)] {
        for k in 1..=9 {
            let p = k as f64 / 10.0;
            let md =
                optimal_aug_general(mu1, mu0, (mu1 - mu0) / 2.0, p, Estimand::MeanDiff).unwrap();
            worst = worst.max((md - (mu1 + mu0) / 2.0).abs());
            let rr =
                optimal_aug_general(mu1, mu0, (mu1 / mu0).ln(), p, Estimand::RiskRatio).unwrap();
            worst = worst.max((rr - (1.0 - mu1 - mu0)).abs());
        }
    }
    assert!(report(
        "3",
        worst < 1e-12,
        &format!("4 mean pairs x 9 randomization probabilities, worst deviation {worst:.2e}"),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 4: stage-2 estimates under a0 in {truth, 0, truth+5} agree
// within 3 Monte Carlo SE at n = 50,000, < 2 min. Fits differing only in a0
// differ per cell by -2 sum(w t da0)/sum(w); its SE is computed exactly from
// the weights.
// ---------------------------------------------------------------------------

#[test]
fn criterion4_augmentation_robustness() {
    let start = std::time::Instant::now();
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut rows, mut y, mut t, mut a0_true) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let cell = f64::from(rng.random_bool(0.5));
        let (main, tau) = if cell == 0.0 { (0.4, 1.0) } else { (-0.2, -0.5) };
        let ti: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        let eps: f64 = rng.random_range(-1.7..1.7);
        rows.push(vec![cell]);
        y.push(main + tau / 2.0 * f64::from(ti) + eps);
        t.push(ti);
        a0_true.push(main);
    }
    let data = TrialDataset::new(
        y,
        t,
        Matrix::from_rows(rows).unwrap(),
        0.5,
        None,
        OutcomeKind::Continuous,
        None,
    )
    .unwrap();
    let zeros = vec![0.0; n];
    let shifted: Vec<f64> = a0_true.iter().map(|v| v + 5.0).collect();
    let params = newton_params(80, 1.0);
    let fit = |a0: &[f64]| -> Ensemble {
        fit_stage2(&data, a0, &params, Estimand::MeanDiff).unwrap().0
    };
    let (m_true, m_zero, m_shift) = (fit(&a0_true), fit(&zeros), fit(&shifted));

    let mut pass = true;
    let mut details = Vec::new();
    for cell in [0.0, 1.0] {
        let idx: Vec<usize> = (0..n).filter(|&i| data.x().get(i, 0) == cell).collect();
        let sw: f64 = idx.iter().map(|&i| data.combined_weight(i)).sum();
        let se = |da0: &dyn Fn(usize) -> f64| -> f64 {
            idx.iter()
                .map(|&i| {
                    let c = 2.0 * data.combined_weight(i) * da0(i) / sw;
                    c * c
                })
                .sum::<f64>()
                .sqrt()
        };
        let tau = |m: &Ensemble| 2.0 * m.predict(&[cell]).unwrap();
        let d_zero = (tau(&m_true) - tau(&m_zero)).abs();
        let se_zero = se(&|i| a0_true[i]);
        let d_shift = (tau(&m_true) - tau(&m_shift)).abs();
        let se_shift = se(&|_| 5.0);
        pass &= d_zero <= 3.0 * se_zero && d_shift <= 3.0 * se_shift;
        details.push(format!(
            "cell{cell}: |truth-zero| {d_zero:.2e} <= 3x{se_zero:.2e}, |truth-shift| {d_shift:.2e} <= 3x{se_shift:.2e}"
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    assert!(report(
        "4",
        pass,
        &format!("{}; {elapsed:.1}s", details.join("; ")),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 5: continuous design 2, p=50, n=300, 20 replicates, 1000 test
// points; median test MSE ordering TSGBT < WGBT and TSGBT < SGBT, < 30 min.
//
// The TSGBT < WGBT ordering is robust across every configuration and seed
// set tried. The TSGBT < SGBT comparison is much tighter at this sample
// size: per-arm fits with cross-validated early stopping are strong here,
// and 20-replicate medians carry visible Monte Carlo noise. With an oracle
// augmentation the two-stage fit beats the per-arm fit decisively, so the
// closeness is stage-1 estimation noise at n=300, not the machinery.
// ---------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion5_efficiency_ordering() {
    let start = std::time::Instant::now();
    let stage1 = bp(200, 0.05, 1.0, 2, 2.0, 1.0, 1.0, cv(10, 15));
    let stage2 = bp(600, 0.05, 1.0, 3, 2.0, 0.8, 0.8, cv(10, 40));
    let results: Vec<(f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|rep| {
            let train =
                generate(&SimSpec::continuous_setting(2, 300, 50, 500 + 2 * rep).unwrap())
                    .unwrap();
            let test =
                generate(&SimSpec::continuous_setting(2, 1000, 50, 501 + 2 * rep).unwrap())
                    .unwrap();
            let mut p1 = stage1.clone();
            p1.seed = rep;
            let mut p2 = stage2.clone();
            p2.seed = rep;
            let mse_of = |tau: Vec<f64>| {
                mse_scale(&tau, &test.true_tau, Estimand::MeanDiff).unwrap()
            };
            let ts = fit_tsgbt(&train.dataset, &p1, &p2, Estimand::MeanDiff).unwrap();
            let wg = fit_wgbt(&train.dataset, &p2, Estimand::MeanDiff).unwrap();
            let sg = fit_sgbt(&train.dataset, &p2, Estimand::MeanDiff).unwrap();
            let rows = 0..test.dataset.n();
            (
                mse_of(rows.clone().map(|i| ts.model.predict_hte(test.dataset.x().row(i)).unwrap()).collect()),
                mse_of(rows.clone().map(|i| wg.model.predict_hte(test.dataset.x().row(i)).unwrap()).collect()),
                mse_of(rows.clone().map(|i| sg.model.predict_hte(test.dataset.x().row(i)).unwrap()).collect()),
            )
        })
        .collect();
    let ts = median(results.iter().map(|r| r.0).collect());
    let wg = median(results.iter().map(|r| r.1).collect());
    let sg = median(results.iter().map(|r| r.2).collect());
    let wins_wg = results.iter().filter(|r| r.0 < r.1).count();
    let wins_sg = results.iter().filter(|r| r.0 < r.2).count();
    let elapsed = start.elapsed().as_secs_f64();
    let pass_wgbt = ts < wg;
    let pass_sgbt = ts < sg;
    let pass = pass_wgbt && pass_sgbt && elapsed < 1800.0;
    assert!(report(
        "5",
        pass,
        &format!(
            "median test MSE: tsgbt {ts:.2}, wgbt {wg:.2} ({}, per-rep {wins_wg}/20), \
             sgbt {sg:.2} ({}, per-rep {wins_sg}/20); {elapsed:.0}s",
            if pass_wgbt { "tsgbt<wgbt ok" } else { "tsgbt<wgbt VIOLATED" },
            if pass_sgbt { "tsgbt<sgbt ok" } else { "tsgbt<sgbt VIOLATED" },
        ),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 6: permutation-test type-I error. Smoke scale: scenarios P1 and
// P3, continuous (n=300) and binary (n=1500), p=50, 50 datasets x 100
// permutations; rejection at alpha = 0.05 within [0.0, 0.16], < 20 min.
// The full 200 x 200 run with the +-2 binomial SE band is the ignored test
// below.
// ---------------------------------------------------------------------------

fn calibration_rejection(
    scenario: PermScenario,
    kind: OutcomeKind,
    n: usize,
    n_datasets: u64,
    n_perms: usize,
) -> f64 {
    let stage1 = bp(100, 0.1, 4.0, 3, 5.0, 0.8, 0.8, cv(10, 15));
    let stage2 = bp(200, 0.1, 4.0, 3, 5.0, 0.8, 0.8, cv(10, 20));
    let estimand = default_estimand(kind);
    let rejections: usize = (0..n_datasets)
        .into_par_iter()
        .map(|rep| {
            let mut spec = SimSpec::permutation_scenario(scenario, kind, n, 50, 0).unwrap();
            spec.seed = 22_000 + rep;
            let gen = generate(&spec).unwrap();
            let mut p1 = stage1.clone();
            p1.seed = rep;
            let mut p2 = stage2.clone();
            p2.seed = rep;
            let fit = fit_tsgbt(&gen.dataset, &p1, &p2, estimand).unwrap();
            let mut run2 = fit.model.params2.clone();
            run2.n_rounds = fit.model.stage2.n_rounds();
            run2.cv = None;
            let cfg = PermutationConfig {
                n_permutations: n_perms,
                stat_kind: StatKind::Variance,
                seed: 5_000 + rep,
                add_one: false,
                retune: false,
            };
            let res =
                permutation_test(&gen.dataset, &fit.a0, &fit.tau, &run2, estimand, &cfg).unwrap();
            usize::from(res.p_value <= 0.05)
        })
        .sum();
    rejections as f64 / n_datasets as f64
}

#[test]
fn criterion6_type_one_error_smoke() {
    let start = std::time::Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    for (scenario, kind, n) in [
        (PermScenario::P1, OutcomeKind::Continuous, 300usize),
        (PermScenario::P3, OutcomeKind::Continuous, 300),
        (PermScenario::P1, OutcomeKind::Binary, 1500),
        (PermScenario::P3, OutcomeKind::Binary, 1500),
    ] {
        let rate = calibration_rejection(scenario, kind, n, 50, 100);
        pass &= (0.0..=0.16).contains(&rate);
        details.push(format!("{scenario:?}/{kind}: {rate:.3}"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 1200.0;
    assert!(report(
        "6",
        pass,
        &format!(
            "rejection at 0.05 over 50x100 (band [0, 0.16]): {}; {elapsed:.0}s",
            details.join(", ")
        ),
    ));
}

#[test]
#[ignore = "full-scale calibration batch; run with -- --ignored"]
fn criterion6_full_calibration() {
    let mut pass = true;
    let mut details = Vec::new();
    // +-2 binomial SE around 0.05 with 200 datasets
    let half = 2.0 * (0.05f64 * 0.95 / 200.0).sqrt();
    for (scenario, kind, n) in [
        (PermScenario::P1, OutcomeKind::Continuous, 300usize),
        (PermScenario::P3, OutcomeKind::Continuous, 300),
        (PermScenario::P1, OutcomeKind::Binary, 1500),
        (PermScenario::P3, OutcomeKind::Binary, 1500),
    ] {
        let rate = calibration_rejection(scenario, kind, n, 200, 200);
        pass &= (rate - 0.05).abs() <= half;
        details.push(format!("{scenario:?}/{kind}: {rate:.3}"));
    }
    assert!(report(
        "6-full",
        pass,
        &format!(
            "rejection at 0.05 over 200x200 (band 0.05 +- {half:.3}): {}",
            details.join(", ")
        ),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 7: risk-pair solver back-substitution < 1e-10 over 10,000 random
// pairs; binary settings 1-2 empirical prevalence within [0.15, 0.35] at
// n = 50,000.
// ---------------------------------------------------------------------------

#[test]
fn criterion7_binary_generator_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let r = rng.random_range(-2.5..2.5);
        let q = rng.random_range(-30.0..3.0);
        let (p1, pm1) = solve_risk_pair(r, q);
        let rr = ((p1 / pm1).ln() - r).abs();
        let rq = ((p1 * pm1 / ((1.0 - p1) * (1.0 - pm1))).ln() - q).abs();
        worst = worst.max(rr).max(rq);
    }
    let mut pass = worst < 1e-10;
    let mut details = vec![format!("solver residuals over 10k pairs: worst {worst:.1e}")];

    for setting in [1u8, 2] {
        let spec = SimSpec::binary_setting(setting, 50_000, 50, 700 + u64::from(setting)).unwrap();
        let prev = generate(&spec).unwrap().prevalence().unwrap();
        pass &= (0.15..=0.35).contains(&prev);
        details.push(format!("setting {setting} prevalence {prev:.3}"));
    }
    assert!(report("7", pass, &details.join("; ")));
}

// ---------------------------------------------------------------------------
// Criterion 8: continuous design 4 (constant effect): the cross-validated
// stage-2 round count is at most 10 in at least 80% of 50 replicates.
// ---------------------------------------------------------------------------

#[test]
fn criterion8_null_diagnostics() {
    let start = std::time::Instant::now();
    let stage1 = bp(100, 0.1, 4.0, 3, 5.0, 0.8, 0.8, cv(10, 15));
    let stage2 = bp(200, 0.1, 4.0, 3, 5.0, 0.8, 0.8, cv(10, 20));
    let small: usize = (0..50u64)
        .into_par_iter()
        .map(|rep| {
            let spec = SimSpec::continuous_setting(4, 300, 50, 4000 + rep).unwrap();
            let gen = generate(&spec).unwrap();
            let mut p1 = stage1.clone();
            p1.seed = rep;
            let mut p2 = stage2.clone();
            p2.seed = rep;
            let fit = fit_tsgbt(&gen.dataset, &p1, &p2, Estimand::MeanDiff).unwrap();
            usize::from(fit.stage2_curve.chosen_round <= 10)
        })
        .sum();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(report(
        "8",
        small * 5 >= 50 * 4,
        &format!("chosen stage-2 rounds <= 10 in {small}/50 replicates; {elapsed:.0}s"),
    ));
}

// ---------------------------------------------------------------------------
// Criterion 9: fit and permtest runs repeated with the same seed and
// different thread counts produce byte-identical artifacts.
// ---------------------------------------------------------------------------

#[test]
fn criterion9_thread_count_determinism() {
    let exe = env!("CARGO_BIN_EXE_tsgbt");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], threads: &str| {
        let out = std::process::Command::new(exe)
            .args(args)
            .args(["--threads", threads])
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} --threads {threads}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    std::fs::write(
        dir.path().join("sim.json"),
        r#"{"outcome_kind": "continuous", "design": "setting1", "n": 200, "p": 20, "seed": 5}"#,
    )
    .unwrap();
    run(&["simulate", "--config", "sim.json", "--out", "sim"], "2");

    std::fs::write(
        dir.path().join("fit.json"),
        r#"{"data": "sim/data.csv", "outcome_kind": "continuous", "seed": 3,
            "stage1": {"n_rounds": 40, "max_depth": 2, "gamma": 1.0, "subsample": 0.8,
                       "colsample": 0.8, "cv": {"folds": 5, "patience": 8}},
            "stage2": {"n_rounds": 60, "learning_rate": 0.1, "gamma": 1.0, "max_depth": 2,
                       "min_child_weight": 2.0, "subsample": 0.8, "colsample": 0.8,
                       "cv": {"folds": 5, "patience": 8}}}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("perm.json"),
        r#"{"fit": {"data": "sim/data.csv", "outcome_kind": "continuous", "seed": 3,
            "stage1": {"n_rounds": 30, "max_depth": 2, "gamma": 1.0,
                       "cv": {"folds": 5, "patience": 8}},
            "stage2": {"n_rounds": 40, "learning_rate": 0.1, "gamma": 1.0, "max_depth": 2,
                       "subsample": 0.7, "cv": {"folds": 5, "patience": 8}}},
            "n_permutations": 30}"#,
    )
    .unwrap();

    run(&["fit", "--config", "fit.json", "--out", "fit1"], "1");
    run(&["fit", "--config", "fit.json", "--out", "fit4"], "4");
    run(&["permtest", "--config", "perm.json", "--out", "perm1"], "1");
    run(&["permtest", "--config", "perm.json", "--out", "perm4"], "4");

    let mut pass = true;
    let mut checked = 0;
    for (a, b, names) in [
        (
            "fit1",
            "fit4",
            &[
                "model.json",
                "tau.csv",
                "stage1_curve.csv",
                "stage2_curve.csv",
                "importance.csv",
                "summary.json",
            ][..],
        ),
        ("perm1", "perm4", &["permutation.json", "perm_stats.csv"][..]),
    ] {
        for name in names {
            let fa = std::fs::read(dir.path().join(a).join(name)).unwrap();
            let fb = std::fs::read(dir.path().join(b).join(name)).unwrap();
            pass &= fa == fb;
            checked += 1;
        }
    }
    assert!(report(
        "9",
        pass,
        &format!("{checked} artifacts byte-identical across --threads 1 and 4"),
    ));
}
