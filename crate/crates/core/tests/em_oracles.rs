mod common;

use common::random_instance;
use nalgebra::{DMatrix, DVector};
use pfcure_core::data::{order_records, risk_sets, RecordRow, RecurrentDataset};
use pfcure_core::em::{
    ar1_trace_coefficients, baseline_breslow_etail, fit_unpenalized, fit_unpenalized_ml, ml_theta_constant,
    newton_mstep, posterior_weights, reml_theta_ar1, reml_theta_constant, solve_rho_cubic, update_rho_ar1,
    FitOptions, VarianceMethod,
};
use pfcure_core::frailty::{self, TraceCoefficients};
use pfcure_core::likelihood::{evaluate, expit, info_matrix, linear_predictors, CovStructure, ModelParams};
use pfcure_core::simulate::{gen_dataset, Censoring, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_inverse(info: &pfcure_core::InfoMatrix) -> DMatrix<f64> {
    info.sigma.clone().try_inverse().unwrap()
}

/// Tiny fixtures can leave a latency direction with no curvature (a common
/// shift of eta within every risk set); dense inverses are meaningless there.
fn singular(info: &pfcure_core::InfoMatrix) -> bool {
    info.sigma.clone().symmetric_eigenvalues().min() < 1e-8
}

#[test]
fn breslow_matches_double_loop() {
    for seed in 0..20 {
        let inst = random_instance(seed, CovStructure::Constant, 10);
        let base = baseline_breslow_etail(&inst.params, &inst.g, &inst.view, &inst.risk).unwrap();
        let lp = linear_predictors(&inst.params, &inst.view).unwrap();
        let v = &inst.view;
        let n = v.n();
        let mut times: Vec<f64> = (0..n).filter(|&r| v.status[r]).map(|r| v.time[r]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        assert_eq!(base.knots, times);
        let mut h = 0.0;
        for (k, &t) in times.iter().enumerate() {
            let events = (0..n).filter(|&r| v.status[r] && v.time[r] == t).count() as f64;
            let denom: f64 = (0..n).filter(|&l| v.time[l] >= t).map(|l| inst.g[l] * lp.eta[l].exp()).sum();
            h += events / denom;
            assert!((base.cumhaz[k] - h).abs() < 1e-12 * h.max(1.0), "seed {seed} knot {k}");
            assert!((base.survival(t) - (-h).exp()).abs() < 1e-12);
        }
        // exponential tail continues the step function at t_h
        let th = base.t_h;
        assert!((base.survival(th * (1.0 + 1e-12)) - base.survival(th)).abs() < 1e-10);
        assert!(base.psi_hat >= 0.0);
        assert!(base.survival(2.0 * th) < base.survival(th) || base.psi_hat == 0.0);
        assert!(base.values.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn posterior_weights_follow_mixture_formula() {
    for seed in 0..10 {
        let inst = random_instance(seed, CovStructure::Ar1, 20);
        let base = baseline_breslow_etail(&inst.params, &inst.g, &inst.view, &inst.risk).unwrap();
        let (g, clamped) = posterior_weights(&inst.params, &base, &inst.view).unwrap();
        assert_eq!(clamped, 0);
        let lp = linear_predictors(&inst.params, &inst.view).unwrap();
        for r in 0..inst.view.n() {
            if inst.view.status[r] {
                assert_eq!(g[r], 1.0);
            } else {
                let pi = expit(lp.xi[r]);
                let s = base.survival(inst.view.time[r]).powf(lp.eta[r].exp());
                let expect = pi * s / (1.0 - pi + pi * s);
                assert!((g[r] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn newton_from_maximizer_takes_no_real_step() {
    let opts = FitOptions::default();
    for structure in [CovStructure::Constant, CovStructure::Ar1] {
        for rep in 0..3 {
            let data = small_design(40, 0.5, 13, rep);
            let view = order_records(&data);
            let risk = risk_sets(&view);
            let g: Vec<f64> = view.status.iter().map(|&d| if d { 1.0 } else { 0.4 }).collect();
            let mut p = ModelParams::zeros(&view, structure, 0.5, 0.3);
            let tight = FitOptions {
                param_tol: 1e-9,
                ..opts.clone()
            };
            let first = newton_mstep(&mut p, &g, &view, &risk, &tight).unwrap();
            assert!(first.score_norm < 1e-6, "score {:e}", first.score_norm);
            let start = p.clone();
            let out = newton_mstep(&mut p, &g, &view, &risk, &opts).unwrap();
            assert!(out.iterations <= 1, "{} iterations", out.iterations);
            assert!((p.omega() - start.omega()).amax() < 1e-9);
        }
    }
}

#[test]
fn newton_recovers_logistic_intercept() {
    // intercept-only incidence, no events: the latency part is constant
    let m = 7;
    let rows: Vec<RecordRow> = (0..m)
        .map(|i| RecordRow {
            subject_id: i as i64,
            event_index: 1,
            gap_time: 1.0 + i as f64,
            status: false,
        })
        .collect();
    let data = RecurrentDataset::new(
        rows,
        (0..m as i64).collect(),
        DMatrix::zeros(m, 0),
        DMatrix::from_fn(m, 1, |i, _| i as f64 * 0.1),
        vec![],
        vec!["z".into()],
    )
    .unwrap();
    let view = order_records(&data);
    let risk = risk_sets(&view);
    let g = [0.1, 0.9, 0.3, 0.3, 0.7, 0.2, 0.6];
    let mut p = ModelParams::zeros(&view, CovStructure::Constant, 1e-10, 0.0);
    newton_mstep(&mut p, &g, &view, &risk, &FitOptions::default()).unwrap();
    let ybar = g.iter().sum::<f64>() / m as f64;
    assert!((p.alpha[0] - (ybar / (1.0 - ybar)).ln()).abs() < 1e-8, "{}", p.alpha[0]);
}

#[test]
fn reml_and_ml_traces_match_dense_inverse() {
    for seed in 0..15 {
        let inst = random_instance(seed, CovStructure::Constant, 20);
        let info = info_matrix(&inst.params, &inst.view, &inst.g, &inst.risk).unwrap();
        let u = &inst.params.u;
        let q = u.len() as f64;
        let full = dense_inverse(&info);
        let r = info.blocks.u.clone();
        let tr_reml: f64 = r.clone().map(|k| full[(k, k)]).sum();
        let reml = reml_theta_constant(&info, u, 1e-6).unwrap();
        assert!((reml - (tr_reml + u.norm_squared()) / q).abs() < 1e-10);
        let zeta = info.u_u().try_inverse().unwrap();
        let ml = ml_theta_constant(&info, u, 1e-6).unwrap();
        assert!((ml - (zeta.trace() + u.norm_squared()) / q).abs() < 1e-10);
        assert!(zeta.trace() <= tr_reml + 1e-12);
        assert!(ml <= reml + 1e-12);
    }
}

#[test]
fn ml_equals_reml_without_cross_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
    let mut sigma = DMatrix::zeros(7, 7);
    sigma.view_mut((3, 3), (4, 4)).copy_from(&(a.transpose() * &a + DMatrix::identity(4, 4)));
    for k in 0..3 {
        sigma[(k, k)] = 2.0 + k as f64;
    }
    let info = pfcure_core::InfoMatrix::new(sigma, pfcure_core::Blocks::new(1, 2, 4));
    let u = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
    let reml = reml_theta_constant(&info, &u, 1e-6).unwrap();
    let ml = ml_theta_constant(&info, &u, 1e-6).unwrap();
    assert!((reml - ml).abs() < 1e-12);
}

#[test]
fn ar1_theta_matches_dense_g() {
    for seed in 0..15 {
        let inst = random_instance(seed, CovStructure::Ar1, 20);
        let info = info_matrix(&inst.params, &inst.view, &inst.g, &inst.risk).unwrap();
        if singular(&info) {
            continue;
        }
        let u = &inst.params.u;
        let sizes = &inst.view.subject_sizes;
        let r = info.blocks.u.clone();
        let full = dense_inverse(&info);
        let x = full.view((r.start, r.start), (r.len(), r.len())).clone_owned() + u * u.transpose();
        let rho = inst.params.rho;
        let dense = (frailty::ar1_g_inv(sizes, rho) * &x).trace() / u.len() as f64;
        let theta = reml_theta_ar1(&info, u, sizes, rho, 1e-12).unwrap();
        assert!((theta - dense).abs() < 1e-10 * dense.abs().max(1.0), "seed {seed}");
        let parts = ar1_trace_coefficients(&info, u, sizes, VarianceMethod::Reml).unwrap();
        let direct = TraceCoefficients::from_dense(&x, sizes);
        assert!((parts.b1 - direct.b1).abs() < 1e-10);
        assert!((parts.b2 - direct.b2).abs() < 1e-10);
        assert!((parts.b3 - direct.b3).abs() < 1e-10);
    }
}

#[test]
fn rho_root_solves_cubic_and_estimating_equation() {
    let mut hits = 0;
    for seed in 0..30 {
        let inst = random_instance(seed, CovStructure::Ar1, 20);
        let info = info_matrix(&inst.params, &inst.view, &inst.g, &inst.risk).unwrap();
        if singular(&info) {
            continue;
        }
        let u = &inst.params.u;
        let sizes = &inst.view.subject_sizes;
        let (n, m) = (u.len(), sizes.len());
        let b = ar1_trace_coefficients(&info, u, sizes, VarianceMethod::Reml).unwrap();
        let (rho, how) = update_rho_ar1(&info, u, sizes, 0.0).unwrap();
        if how == pfcure_core::em::RhoMethod::Kept {
            continue;
        }
        let a = b.cubic(n, m);
        let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
        assert!(frailty::cubic_eval(&a, rho).abs() < 1e-8 * scale, "seed {seed}");
        if rho.abs() >= 0.999 {
            continue;
        }
        // dense estimating equation for rho at theta(rho)
        let r = info.blocks.u.clone();
        let full = dense_inverse(&info);
        let x = full.view((r.start, r.start), (n, n)).clone_owned() + u * u.transpose();
        let theta = b.theta(n, rho);
        let (i, j, k) = frailty::ar1_ijk(sizes);
        let rhs = (&x * (i * (2.0 * rho) - j - k * (2.0 * rho))).trace();
        let lhs = -2.0 * m as f64 * rho / (1.0 - rho * rho) * theta;
        assert!((lhs - rhs).abs() < 1e-6 * rhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
        hits += 1;
    }
    assert!(hits >= 15, "only {hits} instances had an admissible root");
}

#[test]
fn random_cubics_have_small_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let b1 = rng.random_range(0.5..5.0);
        let b3 = rng.random_range(0.1..b1);
        let b = TraceCoefficients {
            b1,
            b2: rng.random_range(-0.5..0.5) * b1,
            b3,
        };
        let m = rng.random_range(2..50);
        let n = m + rng.random_range(1..100);
        let (rho, how) = solve_rho_cubic(&b, n, m, rng.random_range(-0.9..0.9));
        if how == pfcure_core::em::RhoMethod::Kept {
            continue;
        }
        let a = b.cubic(n, m);
        let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(frailty::cubic_eval(&a, rho).abs() < 1e-8 * scale.max(1.0) || rho.abs() >= 0.999);
    }
}

fn small_design(m: usize, theta: f64, seed: u64, rep: usize) -> RecurrentDataset {
    let mut cfg = SimConfig::paper(m, theta, Censoring::Low25, seed);
    cfg.replications = 1;
    gen_dataset(&cfg, &mut cfg.replication_rng(rep)).unwrap().0
}

#[test]
fn converged_fit_is_stationary() {
    // record-level effects carry little information each, so AR(1) EM is slow
    let opts = FitOptions {
        max_em_iter: 1000,
        ..FitOptions::default()
    };
    for (structure, rep) in [(CovStructure::Constant, 0), (CovStructure::Constant, 1), (CovStructure::Ar1, 3)] {
        let mut cfg = SimConfig::paper(80, 0.5, Censoring::Low25, 5);
        cfg.structure = structure;
        cfg.rho = 0.5;
        let data = gen_dataset(&cfg, &mut cfg.replication_rng(rep)).unwrap().0;
        let fit = fit_unpenalized(&data, structure, &opts).unwrap();
        let st = &fit.state;
        assert!(st.converged, "{structure}: {} iterations", st.iterations);
        assert_eq!(st.g_event_violations, 0);
        let view = order_records(&data);
        let risk = risk_sets(&view);
        let ev = evaluate(&st.params, &view, &st.g, &risk, false).unwrap();
        assert!(ev.score.amax() < 1e-5, "{structure}: score {:e}", ev.score.amax());
        assert!(st.params.theta >= FitOptions::default().theta_floor);
    }
}

#[test]
fn ml_and_reml_share_the_fixed_effect_path_shape() {
    let data = small_design(60, 1.0, 9, 0);
    let opts = FitOptions::default();
    let reml = fit_unpenalized(&data, CovStructure::Constant, &opts).unwrap();
    let ml = fit_unpenalized_ml(&data, CovStructure::Constant, &opts).unwrap();
    assert!(ml.state.params.theta >= opts.theta_floor);
    assert!(ml.state.params.theta <= reml.state.params.theta + 1e-8);
    // with the variance held fixed the two methods are the same algorithm
    let fixed = FitOptions {
        fix_variance: true,
        ..opts.clone()
    };
    let a = fit_unpenalized(&data, CovStructure::Constant, &fixed).unwrap();
    let b = fit_unpenalized_ml(&data, CovStructure::Constant, &fixed).unwrap();
    assert_eq!(a.state.params.omega(), b.state.params.omega());
    assert_eq!(a.state.iterations, b.state.iterations);
}

#[test]
fn ar1_reduces_to_constant_with_single_records() {
    let mut cfg = SimConfig::paper(120, 0.8, Censoring::High40, 4);
    cfg.max_records = 1;
    let (data, _) = gen_dataset(&cfg, &mut cfg.replication_rng(0)).unwrap();
    let opts = FitOptions::default();
    let c = fit_unpenalized(&data, CovStructure::Constant, &opts).unwrap();
    let a = fit_unpenalized(&data, CovStructure::Ar1, &opts).unwrap();
    assert_eq!(a.state.params.rho, 0.0);
    assert!((c.state.params.omega() - a.state.params.omega()).amax() < 1e-6);
    assert!((c.state.params.theta - a.state.params.theta).abs() < 1e-6);
}

/// Logistic regression with fractional outcomes, plain Newton on dense
/// matrices.
fn logistic_oracle(w: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let mut a = DVector::zeros(w.ncols());
    for _ in 0..100 {
        let mut grad = DVector::zeros(w.ncols());
        let mut hess = DMatrix::zeros(w.ncols(), w.ncols());
        for r in 0..w.nrows() {
            let x = w.row(r).transpose();
            let pi = 1.0 / (1.0 + (-x.dot(&a)).exp());
            grad += &x * (y[r] - pi);
            hess += &x * x.transpose() * (pi * (1.0 - pi));
        }
        let step = hess.lu().solve(&grad).unwrap();
        a += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    a
}

/// Breslow partial likelihood with offsets `log g`, by Newton with explicit
/// risk-set sums.
fn cox_oracle(z: &DMatrix<f64>, time: &[f64], status: &[bool], g: &[f64]) -> DVector<f64> {
    let n = z.nrows();
    let p = z.ncols();
    let mut b = DVector::zeros(p);
    for _ in 0..100 {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for r in (0..n).filter(|&r| status[r]) {
            let mut s0 = 0.0;
            let mut s1 = DVector::zeros(p);
            let mut s2 = DMatrix::zeros(p, p);
            for l in (0..n).filter(|&l| time[l] >= time[r]) {
                let x = z.row(l).transpose();
                let wgt = g[l] * x.dot(&b).exp();
                s0 += wgt;
                s1 += &x * wgt;
                s2 += &x * x.transpose() * wgt;
            }
            let mean = &s1 / s0;
            grad += z.row(r).transpose() - &mean;
            hess += s2 / s0 - &mean * mean.transpose();
        }
        let step = hess.lu().solve(&grad).unwrap();
        b += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    b
}

#[test]
fn negligible_frailty_reduces_to_logistic_and_cox() {
    let mut cfg = SimConfig::paper(150, 0.0, Censoring::Low25, 21);
    cfg.replications = 1;
    let (data, _) = gen_dataset(&cfg, &mut cfg.replication_rng(0)).unwrap();
    let opts = FitOptions {
        fix_variance: true,
        theta_init: 1e-6,
        em_tol: 1e-10,
        param_tol: 1e-8,
        max_em_iter: 500,
        ..FitOptions::default()
    };
    let fit = fit_unpenalized(&data, CovStructure::Constant, &opts).unwrap();
    let st = &fit.state;
    assert!(st.converged);
    assert_eq!(st.g_event_violations, 0, "an E-step gave an event record g != 1");
    assert!(st.params.u.amax() < 1e-3);
    let view = order_records(&data);
    // canonical-order oracles on the final posterior weights
    let mut g = vec![0.0; view.n()];
    let mut y = vec![0.0; view.n()];
    let mut time = vec![0.0; view.n()];
    let mut status = vec![false; view.n()];
    for (r, &row) in view.perm.iter().enumerate() {
        g[row] = st.g[r];
        y[row] = st.g[r];
        time[row] = view.time[r];
        status[row] = view.status[r];
    }
    let sub = data.subject_of_row();
    let w = DMatrix::from_fn(data.n(), data.d() + 1, |r, j| if j == 0 { 1.0 } else { data.incidence()[(sub[r], j - 1)] });
    let z = DMatrix::from_fn(data.n(), data.p(), |r, j| data.latency()[(sub[r], j)]);
    let alpha = logistic_oracle(&w, &y);
    let beta = cox_oracle(&z, &time, &status, &g);
    let da = (&alpha - &st.params.alpha).amax();
    let db = (&beta - &st.params.beta).amax();
    assert!(da < 1e-3, "alpha differs by {da}");
    assert!(db < 1e-3, "beta differs by {db}");
}
