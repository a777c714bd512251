//! Unpenalized EM fit: posterior cure weights, Breslow baseline with an
//! exponential tail, Newton M-step and REML/ML variance-component updates.

use nalgebra::{DMatrix, DVector};

use crate::data::{order_records, risk_sets, OrderedView, RecurrentDataset, RiskSet};
use crate::error::{Error, Result};
use crate::frailty::{self, TraceCoefficients};
use crate::likelihood::{evaluate, expit, linear_predictors, softplus, CovStructure, InfoMatrix, LatencyWorkspace, ModelParams};
use crate::linalg::{lower_triangular_inverse, Cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceMethod {
    Reml,
    Ml,
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VarianceMethod::Reml => "reml",
            VarianceMethod::Ml => "ml",
        })
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reml" => Ok(VarianceMethod::Reml),
            "ml" => Ok(VarianceMethod::Ml),
            other => Err(Error::config("variance", format!("expected reml|ml, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_em_iter: usize,
    pub max_newton_iter: usize,
    /// Relative log-likelihood change `|dl| / (|l| + 1)`.
    pub em_tol: f64,
    /// Max absolute change over all parameters.
    pub param_tol: f64,
    pub theta_floor: f64,
    pub variance_method: VarianceMethod,
    pub theta_init: f64,
    pub rho_init: f64,
    /// Holds `theta` (and `rho`) at their initial values when set.
    pub fix_variance: bool,
    /// Squared-extrapolation acceleration of the EM map. Each iteration is
    /// still a full E-step, baseline, M-step and variance update, and
    /// convergence is always judged on a plain iteration.
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_em_iter: 200,
            max_newton_iter: 30,
            em_tol: 1e-6,
            param_tol: 1e-5,
            theta_floor: 1e-6,
            variance_method: VarianceMethod::Reml,
            theta_init: 0.5,
            rho_init: 0.0,
            fix_variance: false,
            accelerate: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("em_tol", self.em_tol),
            ("param_tol", self.param_tol),
            ("theta_floor", self.theta_floor),
            ("theta", self.theta_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if self.max_em_iter == 0 || self.max_newton_iter == 0 {
            return Err(Error::config("max_em_iter", "iteration limits must be at least 1"));
        }
        if !(self.rho_init.abs() < 1.0) {
            return Err(Error::config("rho", format!("must lie in (-1, 1), got {}", self.rho_init)));
        }
        Ok(())
    }
}

/// Baseline survival of the uncured: a Breslow step function up to the
/// largest event time `t_h`, then `exp(-psi_hat * t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSurvival {
    /// Distinct event times, ascending.
    pub knots: Vec<f64>,
    /// Survival just after each knot; nonincreasing.
    pub values: Vec<f64>,
    /// Cumulative hazard at each knot; `values = exp(-cumhaz)`.
    pub cumhaz: Vec<f64>,
    pub t_h: f64,
    pub psi_hat: f64,
}

impl BaselineSurvival {
    /// Step function with the given cumulative hazards at `knots`, completed
    /// by the exponential tail through the last knot.
    pub fn from_cumulative_hazard(knots: Vec<f64>, cumhaz: Vec<f64>) -> Self {
        let t_h = *knots.last().expect("at least one knot");
        let h_last = *cumhaz.last().expect("at least one knot");
        let psi_hat = if t_h > 0.0 { (h_last / t_h).max(0.0) } else { 0.0 };
        Self {
            values: cumhaz.iter().map(|h| (-h).exp()).collect(),
            knots,
            cumhaz,
            t_h,
            psi_hat,
        }
    }

    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        if t > self.t_h {
            // h_last * (t / t_h) rather than psi_hat * t: equal to the last
            // step value at t = t_h without rounding
            let h_last = *self.cumhaz.last().expect("at least one knot");
            return if self.t_h > 0.0 { h_last.max(0.0) * (t / self.t_h) } else { 0.0 };
        }
        // last knot <= t
        let k = self.knots.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.cumhaz[k - 1]
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub theta: f64,
    pub rho: f64,
    pub max_change: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct EMState {
    pub params: ModelParams,
    /// Posterior probability of being uncured, sorted order.
    pub g: Vec<f64>,
    pub baseline: BaselineSurvival,
    pub loglik: f64,
    pub iterations: usize,
    pub newton_iterations: usize,
    pub converged: bool,
    /// E-step denominators that vanished and were clamped to `g = 0`.
    pub g_clamped: usize,
    /// Records with an observed event whose weight differed from 1 after an
    /// E-step. Always 0 for a correct E-step.
    pub g_event_violations: usize,
    /// EM iterations where the objective fell by more than `1e-8`.
    pub ascent_violations: usize,
    /// Variance updates that hit the floor or failed to find a root.
    pub variance_warnings: usize,
    pub trace: Vec<IterationRecord>,
}

impl EMState {
    /// True when `theta` ended at the floor.
    pub fn frailty_negligible(&self, opts: &FitOptions) -> bool {
        self.params.theta <= opts.theta_floor
    }
}

/// Posterior weights from current parameters and baseline.
///
/// Returns the number of records whose denominator vanished.
pub fn e_step(state: &mut EMState, view: &OrderedView) -> Result<usize> {
    let (g, clamped) = posterior_weights(&state.params, &state.baseline, view)?;
    state.g = g;
    state.g_event_violations += event_weight_violations(&state.g, view);
    state.g_clamped += clamped;
    Ok(clamped)
}

/// Posterior weights and the number of clamped records.
pub fn posterior_weights(params: &ModelParams, baseline: &BaselineSurvival, view: &OrderedView) -> Result<(Vec<f64>, usize)> {
    let lp = linear_predictors(params, view)?;
    let mut clamped = 0;
    let g = (0..view.n())
        .map(|r| {
            if view.status[r] {
                return 1.0;
            }
            let (g, bad) = posterior_weight(lp.xi[r], lp.eta[r], baseline.cumulative_hazard(view.time[r]));
            clamped += bad as usize;
            g
        })
        .collect();
    Ok((g, clamped))
}

fn event_weight_violations(g: &[f64], view: &OrderedView) -> usize {
    view.status.iter().zip(g).filter(|(&d, &g)| d && g != 1.0).count()
}

/// `pi S^exp(eta) / (1 - pi + pi S^exp(eta))` for a censored record, in log
/// space. The flag marks a vanished denominator.
fn posterior_weight(xi: f64, eta: f64, cumhaz: f64) -> (f64, bool) {
    // log(pi) - Lambda e^eta versus log(1 - pi)
    let log_uncured = -softplus(-xi) - cumhaz * eta.exp();
    let log_cured = -softplus(xi);
    if log_uncured == f64::NEG_INFINITY && log_cured == f64::NEG_INFINITY {
        return (0.0, true);
    }
    let g = expit(log_uncured - log_cured);
    if g.is_nan() {
        return (0.0, true);
    }
    (g, false)
}

/// Breslow estimate of the uncured baseline survival, completed by an
/// exponential tail beyond the largest event time.
pub fn baseline_breslow_etail(params: &ModelParams, g: &[f64], view: &OrderedView, risk: &RiskSet) -> Result<BaselineSurvival> {
    if !view.status.iter().any(|&d| d) {
        return Err(Error::DegenerateLikelihood("no uncensored records".into()));
    }
    let lp = linear_predictors(params, view)?;
    let ws = LatencyWorkspace::new(&lp.eta, g, view, risk).map_err(|e| match e {
        Error::DegenerateLikelihood(_) => {
            let time = (0..view.n())
                .find(|&r| view.status[r] && risk.members(r).all(|l| g[l] == 0.0))
                .map(|r| view.time[r])
                .unwrap_or(f64::NAN);
            Error::DegenerateBaseline { time }
        }
        other => other,
    })?;
    Ok(baseline_from_workspace(&ws, view, risk))
}

fn baseline_from_workspace(ws: &LatencyWorkspace, view: &OrderedView, risk: &RiskSet) -> BaselineSurvival {
    let scale = (-ws.shift).exp();
    let mut knots = Vec::new();
    let mut cumhaz = Vec::new();
    let mut r = 0;
    while r < view.n() {
        let end = risk.group_end(r);
        if (r..=end).any(|k| view.status[k]) {
            knots.push(view.time[r]);
            cumhaz.push(ws.s[r] * scale);
        }
        r = end + 1;
    }
    BaselineSurvival::from_cumulative_hazard(knots, cumhaz)
}

/// Outcome of one Newton M-step.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub iterations: usize,
    /// Factorizations performed.
    pub factorizations: usize,
    pub loglik: f64,
    /// Information at the last factorization point, which is within one
    /// converged step of the returned parameters.
    pub info: InfoMatrix,
    pub score_norm: f64,
}

/// Maximizes the BLUP objective over `(alpha, beta, u)` at fixed `g` and
/// variance components.
///
/// Steps solve against the current factorization of `Sigma`; the matrix is
/// reassembled and refactored only when a step fails to contract by 4x or
/// needed halving. Stops when the step falls below `param_tol / 100`.
pub fn newton_mstep(
    params: &mut ModelParams,
    g: &[f64],
    view: &OrderedView,
    risk: &RiskSet,
    opts: &FitOptions,
) -> Result<NewtonOutcome> {
    let ev = evaluate(params, view, g, risk, true)?;
    let mut info = ev.info.expect("info requested");
    let mut loglik = ev.loglik;
    let mut score = ev.score;
    let mut fresh = true;
    let mut factorizations = 1;
    let mut iterations = 0;
    let mut last_size = f64::INFINITY;
    let tol = opts.param_tol * 1e-2;
    while iterations < opts.max_newton_iter && score.amax() >= 1e-9 {
        let step = info.cholesky()?.solve(&score);
        let base = params.omega();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let mut trial = params.clone();
            trial.set_omega(&(&base + &step * scale));
            match evaluate(&trial, view, g, risk, false) {
                Ok(t) if t.loglik.is_finite() && t.loglik >= loglik - 1e-12 * loglik.abs().max(1.0) => {
                    accepted = Some((trial, t));
                    break;
                }
                Ok(_) | Err(Error::DegenerateLikelihood(_)) => scale *= 0.5,
                Err(e) => return Err(e),
            }
        }
        iterations += 1;
        let size = step.amax() * scale;
        let moved = accepted.is_some();
        match accepted {
            Some((trial, t)) => {
                *params = trial;
                loglik = t.loglik;
                score = t.score;
            }
            None if fresh => {
                log::debug!("newton: no ascent after 20 halvings");
                break;
            }
            None => {}
        }
        if size < tol && moved {
            break;
        }
        if scale < 1.0 || !moved || size > 0.25 * last_size {
            let ev = evaluate(params, view, g, risk, true)?;
            info = ev.info.expect("info requested");
            loglik = ev.loglik;
            score = ev.score;
            fresh = true;
            factorizations += 1;
        } else {
            fresh = false;
        }
        last_size = size;
    }
    Ok(NewtonOutcome {
        iterations,
        factorizations,
        loglik,
        info,
        score_norm: score.amax(),
    })
}

/// REML update `theta = (tr Sigma*_uu + u^T u) / m`, floored.
pub fn reml_theta_constant(info: &InfoMatrix, u: &DVector<f64>, floor: f64) -> Result<f64> {
    let tr = info.cholesky()?.trailing_inverse_trace(info.blocks.u.start);
    Ok(theta_from_trace(tr, u, floor))
}

/// ML update: `zeta_uu^{-1}` in place of `Sigma*_uu`.
pub fn ml_theta_constant(info: &InfoMatrix, u: &DVector<f64>, floor: f64) -> Result<f64> {
    let chol = Cholesky::new(&info.u_u())?;
    Ok(theta_from_trace(chol.trailing_inverse_trace(0), u, floor))
}

fn theta_from_trace(trace: f64, u: &DVector<f64>, floor: f64) -> f64 {
    let theta = (trace + u.norm_squared()) / u.len() as f64;
    if theta < floor {
        log::debug!("theta {theta:e} floored at {floor:e}");
    }
    theta.max(floor)
}

/// Trace coefficients for the AR(1) updates, from either `Sigma*_uu` (REML)
/// or `zeta_uu^{-1}` (ML).
pub fn ar1_trace_coefficients(info: &InfoMatrix, u: &DVector<f64>, sizes: &[usize], method: VarianceMethod) -> Result<TraceCoefficients> {
    let x = match method {
        VarianceMethod::Reml => info.cholesky()?.trailing_inverse_factor(info.blocks.u.start),
        VarianceMethod::Ml => lower_triangular_inverse(Cholesky::new(&info.u_u())?.l()),
    };
    let q = x.ncols();
    let diag: Vec<f64> = (0..q).map(|k| x.column(k).norm_squared()).collect();
    let off: Vec<f64> = (0..q)
        .map(|k| if k + 1 < q { x.column(k).dot(&x.column(k + 1)) } else { 0.0 })
        .collect();
    Ok(TraceCoefficients::from_parts(&diag, &off, u, sizes))
}

/// AR(1) REML `theta` at the given `rho`, floored.
pub fn reml_theta_ar1(info: &InfoMatrix, u: &DVector<f64>, sizes: &[usize], rho: f64, floor: f64) -> Result<f64> {
    let b = ar1_trace_coefficients(info, u, sizes, VarianceMethod::Reml)?;
    Ok(b.theta(u.len(), rho).max(floor))
}

/// How the `rho` update was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMethod {
    Newton,
    Bisection,
    /// No admissible root; the previous value is kept.
    Kept,
}

/// Largest admissible `|rho|`.
pub const RHO_BOUND: f64 = 0.999;

/// Root of the REML cubic for `rho`, by Newton from `rho_current`, falling
/// back to bracketing over `(-1, 1)`.
pub fn solve_rho_cubic(b: &TraceCoefficients, n: usize, m: usize, rho_current: f64) -> (f64, RhoMethod) {
    let a = b.cubic(n, m);
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut rho = rho_current.clamp(-RHO_BOUND, RHO_BOUND);
    let mut ok = false;
    for _ in 0..100 {
        let f = frailty::cubic_eval(&a, rho);
        let df = frailty::cubic_deriv(&a, rho);
        if f.abs() <= 1e-15 * scale {
            ok = true;
            break;
        }
        if df == 0.0 || !df.is_finite() {
            break;
        }
        let next = rho - f / df;
        if !(next.abs() < 1.0) {
            break;
        }
        let done = (next - rho).abs() < 1e-15;
        rho = next;
        if done {
            ok = true;
            break;
        }
    }
    if ok && rho.abs() < 1.0 {
        return (rho.clamp(-RHO_BOUND, RHO_BOUND), RhoMethod::Newton);
    }
    // bracket all sign changes and keep the root with the best profile
    let profile = |r: f64| {
        let q = (1.0 + r * r) * b.b1 - 2.0 * r * b.b2 - r * r * b.b3;
        if q <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -0.5 * n as f64 * q.ln() + 0.5 * m as f64 * (1.0 - r * r).ln()
        }
    };
    let grid = 2000;
    let mut best: Option<(f64, f64)> = None;
    let at = |k: usize| -RHO_BOUND + 2.0 * RHO_BOUND * k as f64 / grid as f64;
    for k in 0..grid {
        let (mut lo, mut hi) = (at(k), at(k + 1));
        let (mut flo, fhi) = (frailty::cubic_eval(&a, lo), frailty::cubic_eval(&a, hi));
        if flo == 0.0 {
            hi = lo;
        } else if flo.signum() == fhi.signum() {
            continue;
        }
        for _ in 0..200 {
            if hi - lo <= 1e-16 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let fm = frailty::cubic_eval(&a, mid);
            if fm.signum() == flo.signum() {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let p = profile(root);
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((root, p));
        }
    }
    match best {
        Some((root, _)) => (root, RhoMethod::Bisection),
        None => {
            log::warn!("rho cubic has no root in (-1, 1); keeping {rho_current}");
            (rho_current, RhoMethod::Kept)
        }
    }
}

/// REML `rho` update from the information at the current fit.
pub fn update_rho_ar1(info: &InfoMatrix, u: &DVector<f64>, sizes: &[usize], rho_current: f64) -> Result<(f64, RhoMethod)> {
    let b = ar1_trace_coefficients(info, u, sizes, VarianceMethod::Reml)?;
    Ok(solve_rho_cubic(&b, u.len(), sizes.len(), rho_current))
}

/// Converged EM state with the information matrix at the solution.
#[derive(Debug, Clone)]
pub struct UnpenalizedFit {
    pub state: EMState,
    pub info: InfoMatrix,
}

/// Unpenalized logistic regression by Newton's method; starting values only.
fn logistic_start(w: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let k = w.ncols();
    let mut a = DVector::zeros(k);
    let ybar = (y.iter().sum::<f64>() / y.len() as f64).clamp(0.01, 0.99);
    a[0] = (ybar / (1.0 - ybar)).ln();
    for _ in 0..25 {
        let xi = w * &a;
        let pi: Vec<f64> = xi.iter().map(|&v| expit(v)).collect();
        let resid = DVector::from_iterator(y.len(), y.iter().zip(&pi).map(|(y, p)| y - p));
        let mut wg = w.clone();
        for (r, mut row) in wg.row_iter_mut().enumerate() {
            row *= pi[r] * (1.0 - pi[r]);
        }
        let mut h = w.tr_mul(&wg);
        for j in 0..k {
            h[(j, j)] += 1e-6;
        }
        let Ok(chol) = Cholesky::with_ridge(&h) else { break };
        let step = chol.solve(&w.tr_mul(&resid));
        a += &step;
        if step.amax() < 1e-10 || a.amax() > 20.0 {
            break;
        }
    }
    a.map(|v| v.clamp(-20.0, 20.0))
}

/// Point the EM map acts on: model parameters plus the baseline cumulative
/// hazard at the (fixed) event-time knots.
#[derive(Debug, Clone)]
struct EmPoint {
    params: ModelParams,
    cumhaz: Vec<f64>,
}

impl EmPoint {
    fn flatten(&self) -> DVector<f64> {
        let omega = self.params.omega();
        let mut v = Vec::with_capacity(omega.len() + 2 + self.cumhaz.len());
        v.extend(omega.iter());
        v.push(self.params.theta);
        v.push(self.params.rho);
        v.extend(&self.cumhaz);
        DVector::from_vec(v)
    }

    /// Inverse of [`flatten`], projected back into the parameter space.
    fn unflatten(&self, v: &DVector<f64>, opts: &FitOptions) -> Self {
        let k = self.params.blocks().total();
        let mut params = self.params.clone();
        params.set_omega(&v.rows(0, k).clone_owned());
        params.theta = v[k].max(opts.theta_floor);
        if params.structure == CovStructure::Ar1 {
            params.rho = v[k + 1].clamp(-RHO_BOUND, RHO_BOUND);
        }
        let mut cumhaz: Vec<f64> = v.rows(k + 2, self.cumhaz.len()).iter().copied().collect();
        let mut run = 0.0f64;
        for h in cumhaz.iter_mut() {
            run = run.max(*h);
            *h = run;
        }
        Self { params, cumhaz }
    }

    /// Max change over `(alpha, beta, u, theta, rho)`.
    fn param_change(&self, other: &EmPoint) -> f64 {
        (self.params.omega() - other.params.omega())
            .amax()
            .max((self.params.theta - other.params.theta).abs())
            .max((self.params.rho - other.params.rho).abs())
    }
}

/// One EM iteration applied to a point.
struct MapOutput {
    next: EmPoint,
    g: Vec<f64>,
    /// Objective at the input parameters with the new weights.
    loglik_in: f64,
    /// Objective at the output.
    loglik_out: f64,
    newton_steps: usize,
    clamped: usize,
    event_violations: usize,
    variance_warnings: usize,
}

fn em_map(x: &EmPoint, knots: &[f64], view: &OrderedView, risk: &RiskSet, opts: &FitOptions) -> Result<MapOutput> {
    let baseline = BaselineSurvival::from_cumulative_hazard(knots.to_vec(), x.cumhaz.clone());
    let (g, clamped) = posterior_weights(&x.params, &baseline, view).map_err(|e| e.in_stage("e-step"))?;
    let event_violations = event_weight_violations(&g, view);
    let next_baseline = baseline_breslow_etail(&x.params, &g, view, risk).map_err(|e| e.in_stage("baseline"))?;
    let loglik_in = evaluate(&x.params, view, &g, risk, false).map_err(|e| e.in_stage("m-step"))?.loglik;
    let mut params = x.params.clone();
    let nw = newton_mstep(&mut params, &g, view, risk, opts).map_err(|e| e.in_stage("m-step"))?;
    let mut variance_warnings = 0;
    let (theta, rho) =
        update_variance(&nw.info, &params, view, opts, &mut variance_warnings).map_err(|e| e.in_stage("variance"))?;
    params.theta = theta;
    params.rho = rho;
    let loglik_out = evaluate(&params, view, &g, risk, false).map_err(|e| e.in_stage("m-step"))?.loglik;
    Ok(MapOutput {
        next: EmPoint {
            params,
            cumhaz: next_baseline.cumhaz,
        },
        g,
        loglik_in,
        loglik_out,
        newton_steps: nw.iterations,
        clamped,
        event_violations,
        variance_warnings,
    })
}

/// Variance-component update for one EM iteration. Returns `(theta, rho)`.
fn update_variance(
    info: &InfoMatrix,
    params: &ModelParams,
    view: &OrderedView,
    opts: &FitOptions,
    warnings: &mut usize,
) -> Result<(f64, f64)> {
    if opts.fix_variance {
        return Ok((params.theta, params.rho));
    }
    match params.structure {
        CovStructure::Constant => {
            let theta = match opts.variance_method {
                VarianceMethod::Reml => reml_theta_constant(info, &params.u, opts.theta_floor)?,
                VarianceMethod::Ml => ml_theta_constant(info, &params.u, opts.theta_floor)?,
            };
            if theta <= opts.theta_floor {
                *warnings += 1;
            }
            Ok((theta, params.rho))
        }
        CovStructure::Ar1 => {
            let b = ar1_trace_coefficients(info, &params.u, &view.subject_sizes, opts.variance_method)?;
            let (rho, how) = solve_rho_cubic(&b, params.u.len(), view.m, params.rho);
            if how == RhoMethod::Kept {
                *warnings += 1;
            }
            let raw = b.theta(params.u.len(), rho);
            if raw <= opts.theta_floor {
                *warnings += 1;
            }
            Ok((raw.max(opts.theta_floor), rho))
        }
    }
}

/// Bookkeeping shared by plain and extrapolated iterations.
struct Driver<'a> {
    view: &'a OrderedView,
    risk: &'a RiskSet,
    opts: &'a FitOptions,
    knots: Vec<f64>,
    state: EMState,
    prev_loglik: f64,
}

impl Driver<'_> {
    /// Applies the map, records it, and reports convergence of this step.
    fn step(&mut self, x: &EmPoint) -> Result<(MapOutput, bool)> {
        let out = em_map(x, &self.knots, self.view, self.risk, self.opts)?;
        let st = &mut self.state;
        st.iterations += 1;
        st.newton_iterations += out.newton_steps;
        st.g_clamped += out.clamped;
        st.g_event_violations += out.event_violations;
        st.variance_warnings += out.variance_warnings;
        if self.prev_loglik.is_finite() && out.loglik_out < self.prev_loglik - 1e-8 {
            st.ascent_violations += 1;
            log::debug!("em iteration {}: objective fell by {:e}", st.iterations, self.prev_loglik - out.loglik_out);
        }
        self.prev_loglik = out.loglik_out;
        let change = out.next.param_change(x);
        let rel = (out.loglik_out - out.loglik_in).abs() / (out.loglik_in.abs() + 1.0);
        st.trace.push(IterationRecord {
            iteration: st.iterations,
            loglik: out.loglik_out,
            theta: out.next.params.theta,
            rho: out.next.params.rho,
            max_change: change,
            newton_steps: out.newton_steps,
        });
        log::debug!(
            "em iter={} loglik={:.8} theta={:.6} rho={:.6} max_change={change:.3e} newton={}",
            st.iterations,
            out.loglik_out,
            out.next.params.theta,
            out.next.params.rho,
            out.newton_steps
        );
        Ok((out, rel < self.opts.em_tol && change < self.opts.param_tol))
    }

    fn budget_left(&self) -> bool {
        self.state.iterations < self.opts.max_em_iter
    }
}

/// EM fit on an ordered view.
pub fn fit_unpenalized_view(view: &OrderedView, risk: &RiskSet, structure: CovStructure, opts: &FitOptions) -> Result<UnpenalizedFit> {
    opts.validate()?;
    if !view.status.iter().any(|&d| d) {
        return Err(Error::DegenerateLikelihood("no uncensored records".into()).in_stage("initialize"));
    }
    let delta: Vec<f64> = view.status.iter().map(|&d| d as u8 as f64).collect();
    let mut params = ModelParams::zeros(view, structure, opts.theta_init, opts.rho_init);
    params.alpha = logistic_start(&view.design_w, &delta);
    let baseline = baseline_breslow_etail(&params, &delta, view, risk).map_err(|e| e.in_stage("initialize"))?;
    let mut x = EmPoint {
        params: params.clone(),
        cumhaz: baseline.cumhaz.clone(),
    };
    let mut driver = Driver {
        view,
        risk,
        opts,
        knots: baseline.knots.clone(),
        state: EMState {
            params,
            g: delta,
            baseline,
            loglik: f64::NEG_INFINITY,
            iterations: 0,
            newton_iterations: 0,
            converged: false,
            g_clamped: 0,
            g_event_violations: 0,
            ascent_violations: 0,
            variance_warnings: 0,
            trace: Vec::new(),
        },
        prev_loglik: f64::NEG_INFINITY,
    };
    // squared extrapolation step-length bound, grown while extrapolation works
    let mut step_bound = 1.0f64;
    let mut last: Option<MapOutput> = None;
    while driver.budget_left() {
        let (f1, done) = driver.step(&x)?;
        if done || !opts.accelerate || !driver.budget_left() {
            x = f1.next.clone();
            last = Some(f1);
            if done {
                driver.state.converged = true;
                break;
            }
            continue;
        }
        let (f2, done) = driver.step(&f1.next)?;
        if done || !driver.budget_left() {
            x = f2.next.clone();
            last = Some(f2);
            if done {
                driver.state.converged = true;
                break;
            }
            continue;
        }
        let v0 = x.flatten();
        let v1 = f1.next.flatten();
        let v2 = f2.next.flatten();
        let r = &v1 - &v0;
        let v = &v2 - &v1 * 2.0 + &v0;
        let (rn, vn) = (r.norm(), v.norm());
        let alpha = if vn > 0.0 { -(rn / vn).clamp(1.0, step_bound) } else { -1.0 };
        if alpha == -1.0 {
            x = f2.next.clone();
            last = Some(f2);
            step_bound = (step_bound * 4.0).min(256.0);
            continue;
        }
        let xe = x.unflatten(&(&v0 - &r * (2.0 * alpha) + &v * (alpha * alpha)), opts);
        let residual_f2 = (&v2 - &v1).norm();
        match driver.step(&xe) {
            Ok((f3, done)) => {
                let residual = (f3.next.flatten() - xe.flatten()).norm();
                if done {
                    x = f3.next.clone();
                    last = Some(f3);
                    driver.state.converged = true;
                    break;
                }
                if residual.is_finite() && residual <= residual_f2.max(rn) {
                    if alpha <= -step_bound {
                        step_bound = (step_bound * 4.0).min(256.0);
                    }
                    x = f3.next.clone();
                    last = Some(f3);
                } else {
                    step_bound = (step_bound / 4.0).max(1.0);
                    x = f2.next.clone();
                    last = Some(f2);
                }
            }
            Err(e) => {
                log::debug!("extrapolated point rejected: {e}");
                step_bound = 1.0;
                x = f2.next.clone();
                last = Some(f2);
            }
        }
    }
    let last = last.expect("max_em_iter >= 1");
    let mut state = driver.state;
    state.params = x.params;
    state.g = last.g;
    state.baseline = BaselineSurvival::from_cumulative_hazard(driver.knots, x.cumhaz);
    // polish at the reported variance components so the fit is stationary
    let nw = newton_mstep(&mut state.params, &state.g, view, risk, opts).map_err(|e| e.in_stage("m-step"))?;
    state.newton_iterations += nw.iterations;
    let ev = evaluate(&state.params, view, &state.g, risk, true).map_err(|e| e.in_stage("m-step"))?;
    state.loglik = ev.loglik;
    if !state.converged {
        log::warn!("EM did not converge in {} iterations", opts.max_em_iter);
    }
    Ok(UnpenalizedFit {
        state,
        info: ev.info.expect("info requested"),
    })
}

/// EM fit with the variance components estimated as configured in `opts`.
pub fn fit_unpenalized(data: &RecurrentDataset, structure: CovStructure, opts: &FitOptions) -> Result<UnpenalizedFit> {
    let view = order_records(data);
    let risk = risk_sets(&view);
    fit_unpenalized_view(&view, &risk, structure, opts)
}

/// [`fit_unpenalized`] with ML variance components.
pub fn fit_unpenalized_ml(data: &RecurrentDataset, structure: CovStructure, opts: &FitOptions) -> Result<UnpenalizedFit> {
    let opts = FitOptions {
        variance_method: VarianceMethod::Ml,
        ..opts.clone()
    };
    fit_unpenalized(data, structure, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_weight_cases() {
        // pi = 0.5, S = 1
        let (g, bad) = posterior_weight(0.0, 0.0, 0.0);
        assert!((g - 0.5).abs() < 1e-15 && !bad);
        // pi -> 0
        let (g, _) = posterior_weight(-1e4, 0.0, 0.3);
        assert_eq!(g, 0.0);
        // pi = 1 and S^exp(eta) = 0
        let (g, bad) = posterior_weight(f64::INFINITY, 0.0, f64::INFINITY);
        assert_eq!(g, 0.0);
        assert!(bad);
    }

    #[test]
    fn reml_theta_hand_value() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 10.0, 10.0]));
        let info = InfoMatrix::new(sigma, crate::likelihood::Blocks::new(1, 0, 2));
        let u = DVector::from_vec(vec![1.0, -1.0]);
        assert!((reml_theta_constant(&info, &u, 1e-6).unwrap() - 1.1).abs() < 1e-14);
        assert_eq!(reml_theta_constant(&info, &DVector::zeros(2), 1e-6).unwrap(), (0.2 / 2.0f64).max(1e-6));
    }

    #[test]
    fn theta_floor_applies() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e12, 1e12]));
        let info = InfoMatrix::new(sigma, crate::likelihood::Blocks::new(1, 0, 2));
        assert_eq!(reml_theta_constant(&info, &DVector::zeros(2), 1e-6).unwrap(), 1e-6);
    }

    #[test]
    fn ml_theta_hand_value() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 2.0, 2.0]));
        let info = InfoMatrix::new(sigma, crate::likelihood::Blocks::new(1, 0, 3));
        assert!((ml_theta_constant(&info, &DVector::zeros(3), 1e-6).unwrap() - 0.5).abs() < 1e-15);
        assert!((reml_theta_constant(&info, &DVector::zeros(3), 1e-6).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_cubic_root_is_zero() {
        let b = TraceCoefficients { b1: 2.0, b2: 0.0, b3: 2.0 };
        let (rho, _) = solve_rho_cubic(&b, 6, 2, 0.3);
        assert!(rho.abs() < 1e-14);
    }

    #[test]
    fn baseline_single_event() {
        let ws = LatencyWorkspace {
            varpi: vec![1.0],
            e: vec![1.0],
            s: vec![1.0],
            c: vec![1.0],
            log_denom: vec![0.0],
            shift: 0.0,
        };
        let view = OrderedView {
            perm: vec![0],
            time: vec![1.0],
            status: vec![true],
            subject: vec![0],
            design_w: DMatrix::from_element(1, 1, 1.0),
            design_z: DMatrix::zeros(1, 0),
            m: 1,
            subject_sizes: vec![1],
        };
        let risk = crate::data::risk_sets(&view);
        let b = baseline_from_workspace(&ws, &view, &risk);
        assert!((b.survival(1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.psi_hat - 1.0).abs() < 1e-15);
        assert_eq!(b.survival(0.5), 1.0);
    }
}
