//! BLUP log-likelihood of the shared-frailty mixture cure model, its analytic
//! score and the block information matrix.
//!
//! All per-record vectors are in sorted (gap-time) order. The parameter
//! vector is laid out as `Omega = (alpha, beta, u)` with `alpha[0]` the
//! incidence intercept.
//!
//! The latency Hessian `QS - Q F E^2 F^T Q` is an `n x n` dense matrix. It is
//! never materialized: entry `(a, b)` of its low-rank part equals
//! `varpi_a varpi_b C(min(t_a, t_b))`, with `C` the running sum of `e^2`, so
//! the projections onto `Z` and `R` reduce to prefix sums in `O(n p^2 + n q)`.

use std::ops::Range;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::data::{OrderedView, RiskSet};
use crate::error::{Error, Result};
use crate::frailty;
use crate::linalg::{symmetrize, Cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovStructure {
    /// `u ~ N(0, theta I_m)`, one frailty per subject.
    Constant,
    /// `u ~ N(0, theta G(rho))`, one frailty per record, AR(1) within subject.
    Ar1,
}

impl std::fmt::Display for CovStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovStructure::Constant => "constant",
            CovStructure::Ar1 => "ar1",
        })
    }
}

impl std::str::FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(CovStructure::Constant),
            "ar1" => Ok(CovStructure::Ar1),
            other => Err(Error::config("frailty", format!("expected constant|ar1, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(alpha_0, alpha_1, ..., alpha_d)`.
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub theta: f64,
    /// Only meaningful for [`CovStructure::Ar1`].
    pub rho: f64,
    pub structure: CovStructure,
}

impl ModelParams {
    /// All-zero fixed and random effects with the given variance components.
    pub fn zeros(view: &OrderedView, structure: CovStructure, theta: f64, rho: f64) -> Self {
        Self {
            alpha: DVector::zeros(view.design_w.ncols()),
            beta: DVector::zeros(view.design_z.ncols()),
            u: DVector::zeros(view.u_dim(structure)),
            theta,
            rho,
            structure,
        }
    }

    pub fn blocks(&self) -> Blocks {
        Blocks::new(self.alpha.len(), self.beta.len(), self.u.len())
    }

    /// Concatenated `(alpha, beta, u)`.
    pub fn omega(&self) -> DVector<f64> {
        let b = self.blocks();
        let mut out = DVector::zeros(b.total());
        out.rows_mut(b.alpha.start, b.alpha.len()).copy_from(&self.alpha);
        out.rows_mut(b.beta.start, b.beta.len()).copy_from(&self.beta);
        out.rows_mut(b.u.start, b.u.len()).copy_from(&self.u);
        out
    }

    pub fn set_omega(&mut self, omega: &DVector<f64>) {
        let b = self.blocks();
        self.alpha.copy_from(&omega.rows(b.alpha.start, b.alpha.len()));
        self.beta.copy_from(&omega.rows(b.beta.start, b.beta.len()));
        self.u.copy_from(&omega.rows(b.u.start, b.u.len()));
    }

    fn validate(&self, view: &OrderedView) -> Result<()> {
        if self.alpha.len() != view.design_w.ncols() {
            return Err(Error::Dimension(format!(
                "alpha has {} entries, design has {} incidence columns",
                self.alpha.len(),
                view.design_w.ncols()
            )));
        }
        if self.beta.len() != view.design_z.ncols() {
            return Err(Error::Dimension(format!(
                "beta has {} entries, design has {} latency columns",
                self.beta.len(),
                view.design_z.ncols()
            )));
        }
        if self.u.len() != view.u_dim(self.structure) {
            return Err(Error::Dimension(format!(
                "u has {} entries, {} frailty needs {}",
                self.u.len(),
                self.structure,
                view.u_dim(self.structure)
            )));
        }
        if !(self.theta > 0.0) {
            return Err(Error::Dimension(format!("theta must be positive, got {}", self.theta)));
        }
        if self.structure == CovStructure::Ar1 && !(self.rho.abs() < 1.0) {
            return Err(Error::Dimension(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        Ok(())
    }

    /// `D(theta)^{-1} u`.
    pub fn d_inv_mul(&self, sizes: &[usize]) -> DVector<f64> {
        match self.structure {
            CovStructure::Constant => &self.u / self.theta,
            CovStructure::Ar1 => frailty::ar1_g_inv_mul(&self.u, sizes, self.rho) / self.theta,
        }
    }

    /// Normal log-density of `u` (the frailty penalty `l2`).
    pub fn log_prior(&self, sizes: &[usize]) -> f64 {
        let two_pi_theta = (2.0 * std::f64::consts::PI * self.theta).ln();
        match self.structure {
            CovStructure::Constant => {
                -0.5 * (self.u.len() as f64 * two_pi_theta + self.u.norm_squared() / self.theta)
            }
            CovStructure::Ar1 => {
                let quad = self.u.dot(&frailty::ar1_g_inv_mul(&self.u, sizes, self.rho));
                -0.5 * (self.u.len() as f64 * two_pi_theta
                    + frailty::ar1_log_det(sizes.len(), self.rho)
                    + quad / self.theta)
            }
        }
    }
}

/// Index ranges of the `alpha | beta | u` partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocks {
    pub alpha: Range<usize>,
    pub beta: Range<usize>,
    pub u: Range<usize>,
}

impl Blocks {
    pub fn new(d1: usize, p: usize, q: usize) -> Self {
        Self {
            alpha: 0..d1,
            beta: d1..d1 + p,
            u: d1 + p..d1 + p + q,
        }
    }

    pub fn total(&self) -> usize {
        self.u.end
    }

    /// Fixed effects `(alpha, beta)`.
    pub fn fixed(&self) -> Range<usize> {
        0..self.beta.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictors {
    /// `xi = W alpha + R u`.
    pub xi: Vec<f64>,
    /// `eta = Z beta + R u`.
    pub eta: Vec<f64>,
}

pub fn linear_predictors(params: &ModelParams, view: &OrderedView) -> Result<LinearPredictors> {
    params.validate(view)?;
    let uidx = view.u_index(params.structure);
    let wa = &view.design_w * &params.alpha;
    let zb = &view.design_z * &params.beta;
    let xi = (0..view.n()).map(|r| wa[r] + params.u[uidx[r]]).collect();
    let eta = (0..view.n()).map(|r| zb[r] + params.u[uidx[r]]).collect();
    Ok(LinearPredictors { xi, eta })
}

/// Per-call latency quantities.
///
/// `varpi`, `e`, `s` and `c` are scaled by powers of `exp(-shift)` so that
/// `exp(eta)` never overflows; every product the likelihood uses
/// (`varpi * s`, `varpi_a varpi_b c`) is scale free.
#[derive(Debug, Clone)]
pub struct LatencyWorkspace {
    /// `g_b exp(eta_b - shift)`.
    pub varpi: Vec<f64>,
    /// `delta_b / sum_{l in R(b)} varpi_l`.
    pub e: Vec<f64>,
    /// Running sum of `e` over events with time `<= t_b` (Breslow cumulative
    /// hazard at `t_b`, once rescaled).
    pub s: Vec<f64>,
    /// Running sum of `e^2` over events with time `<= t_b`.
    pub c: Vec<f64>,
    /// `log sum_{l in R(b)} g_l exp(eta_l)`, unscaled; 0 for censored records.
    pub log_denom: Vec<f64>,
    pub shift: f64,
}

impl LatencyWorkspace {
    pub fn new(eta: &[f64], g: &[f64], view: &OrderedView, risk: &RiskSet) -> Result<Self> {
        let n = eta.len();
        let shift = eta
            .iter()
            .zip(g)
            .filter(|(_, &gi)| gi > 0.0)
            .map(|(&e, _)| e)
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        let varpi: Vec<f64> = eta.iter().zip(g).map(|(&e, &gi)| gi * (e - shift).exp()).collect();
        // suffix[r] = sum_{l >= r} varpi_l
        let mut suffix = vec![0.0; n + 1];
        for r in (0..n).rev() {
            suffix[r] = suffix[r + 1] + varpi[r];
        }
        let mut e = vec![0.0; n];
        let mut log_denom = vec![0.0; n];
        for r in 0..n {
            if view.status[r] {
                let denom = suffix[risk.start(r)];
                if !(denom > 0.0) {
                    return Err(Error::DegenerateLikelihood(format!(
                        "event at t={} has an empty weighted risk set",
                        view.time[r]
                    )));
                }
                e[r] = 1.0 / denom;
                log_denom[r] = denom.ln() + shift;
            }
        }
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut cum_e = 0.0;
        let mut cum_e2 = 0.0;
        let mut r = 0;
        while r < n {
            let end = risk.group_end(r);
            for k in r..=end {
                cum_e += e[k];
                cum_e2 += e[k] * e[k];
            }
            for k in r..=end {
                s[k] = cum_e;
                c[k] = cum_e2;
            }
            r = end + 1;
        }
        Ok(Self {
            varpi,
            e,
            s,
            c,
            log_denom,
            shift,
        })
    }
}

fn check_weights(g: &[f64], view: &OrderedView) -> Result<()> {
    if g.len() != view.n() {
        return Err(Error::Dimension(format!("{} weights for {} records", g.len(), view.n())));
    }
    for (r, (&gi, &d)) in g.iter().zip(&view.status).enumerate() {
        if !(0.0..=1.0).contains(&gi) {
            return Err(Error::Dimension(format!("weight g[{r}] = {gi} outside [0, 1]")));
        }
        if d && gi != 1.0 {
            return Err(Error::Dimension(format!("event record {r} has weight {gi} != 1")));
        }
    }
    Ok(())
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loglik, score and (optionally) information at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub info: Option<InfoMatrix>,
}

/// Evaluates the BLUP objective and its derivatives in one pass.
pub fn evaluate(
    params: &ModelParams,
    view: &OrderedView,
    g: &[f64],
    risk: &RiskSet,
    with_info: bool,
) -> Result<Evaluation> {
    check_weights(g, view)?;
    let lp = linear_predictors(params, view)?;
    let ws = LatencyWorkspace::new(&lp.eta, g, view, risk)?;
    let n = view.n();
    let uidx = view.u_index(params.structure);
    let blocks = params.blocks();

    let mut loglik = 0.0;
    let mut a = DVector::zeros(n); // d l1 / d xi
    let mut b = DVector::zeros(n); // d l1 / d eta
    let mut pi = vec![0.0; n];
    for r in 0..n {
        let xi = lp.xi[r];
        pi[r] = expit(xi);
        loglik += g[r] * xi - softplus(xi);
        a[r] = g[r] - pi[r];
        if view.status[r] {
            loglik += lp.eta[r] - ws.log_denom[r];
        }
        b[r] = (view.status[r] as u8 as f64) - ws.varpi[r] * ws.s[r];
    }
    loglik += params.log_prior(&view.subject_sizes);

    let mut score = DVector::zeros(blocks.total());
    score
        .rows_mut(blocks.alpha.start, blocks.alpha.len())
        .copy_from(&view.design_w.tr_mul(&a));
    score
        .rows_mut(blocks.beta.start, blocks.beta.len())
        .copy_from(&view.design_z.tr_mul(&b));
    let d_inv_u = params.d_inv_mul(&view.subject_sizes);
    for r in 0..n {
        score[blocks.u.start + uidx[r]] += a[r] + b[r];
    }
    for k in 0..d_inv_u.len() {
        score[blocks.u.start + k] -= d_inv_u[k];
    }

    let info = if with_info {
        Some(assemble_info(params, view, &uidx, &pi, &ws, &blocks))
    } else {
        None
    };
    Ok(Evaluation { loglik, score, info })
}

/// BLUP log-likelihood `l(Omega, theta) = l1 + l2`, with `l2` the normal
/// log-density of the frailties.
pub fn blup_loglik(params: &ModelParams, view: &OrderedView, g: &[f64], risk: &RiskSet) -> Result<f64> {
    Ok(evaluate(params, view, g, risk, false)?.loglik)
}

/// Gradient of [`blup_loglik`] over `(alpha, beta, u)`.
pub fn score(params: &ModelParams, view: &OrderedView, g: &[f64], risk: &RiskSet) -> Result<DVector<f64>> {
    Ok(evaluate(params, view, g, risk, false)?.score)
}

/// Negative Hessian of [`blup_loglik`] over `(alpha, beta, u)`.
pub fn info_matrix(params: &ModelParams, view: &OrderedView, g: &[f64], risk: &RiskSet) -> Result<InfoMatrix> {
    Ok(evaluate(params, view, g, risk, true)?
        .info
        .expect("info requested"))
}

fn assemble_info(
    params: &ModelParams,
    view: &OrderedView,
    uidx: &[usize],
    pi: &[f64],
    ws: &LatencyWorkspace,
    blocks: &Blocks,
) -> InfoMatrix {
    let n = view.n();
    let d1 = blocks.alpha.len();
    let p = blocks.beta.len();
    let q = blocks.u.len();
    let (a0, b0, u0) = (blocks.alpha.start, blocks.beta.start, blocks.u.start);
    let w = &view.design_w;
    let z = &view.design_z;
    let mut sigma = DMatrix::<f64>::zeros(blocks.total(), blocks.total());

    // Incidence: W^T Gamma_xi W and its u couplings.
    let gamma: Vec<f64> = pi.iter().map(|&x| x * (1.0 - x)).collect();
    let mut wg = w.clone();
    for (r, mut row) in wg.row_iter_mut().enumerate() {
        row *= gamma[r];
    }
    sigma.view_mut((a0, a0), (d1, d1)).copy_from(&w.tr_mul(&wg));
    for r in 0..n {
        let k = u0 + uidx[r];
        for j in 0..d1 {
            sigma[(a0 + j, k)] += wg[(r, j)];
        }
        sigma[(k, k)] += gamma[r];
    }

    // Latency diagonal part Q S.
    let kappa: Vec<f64> = (0..n).map(|r| ws.varpi[r] * ws.s[r]).collect();
    let mut zk = z.clone();
    for (r, mut row) in zk.row_iter_mut().enumerate() {
        row *= kappa[r];
    }
    let mut zz = z.tr_mul(&zk);

    // Low-rank part Q F E^2 F^T Q, projected on Z and R.
    // h_r = sum_a varpi_a c_{min(a,r)} z_a = P_r + c_r T_r
    let mut t_tail = DVector::<f64>::zeros(p);
    for r in 0..n {
        for j in 0..p {
            t_tail[j] += ws.varpi[r] * z[(r, j)];
        }
    }
    let mut prefix = DVector::<f64>::zeros(p);
    let mut h = DMatrix::<f64>::zeros(n, p);
    for r in 0..n {
        let vc = ws.varpi[r] * ws.c[r];
        for j in 0..p {
            prefix[j] += vc * z[(r, j)];
            t_tail[j] -= ws.varpi[r] * z[(r, j)];
            h[(r, j)] = prefix[j] + ws.c[r] * t_tail[j];
        }
    }
    let mut zv = z.clone();
    for (r, mut row) in zv.row_iter_mut().enumerate() {
        row *= ws.varpi[r];
    }
    zz -= zv.tr_mul(&h);
    symmetrize(&mut zz);
    sigma.view_mut((b0, b0), (p, p)).copy_from(&zz);

    for r in 0..n {
        let k = u0 + uidx[r];
        for j in 0..p {
            sigma[(b0 + j, k)] += zk[(r, j)] - ws.varpi[r] * h[(r, j)];
        }
        sigma[(k, k)] += kappa[r];
    }

    // u-u low-rank block: L[:, u_b] += varpi_b * acc, acc[u_a] = sum_{a<=b} varpi_a c_a.
    let mut lower = DMatrix::<f64>::zeros(q, q);
    let mut acc = vec![0.0; q];
    {
        let buf = lower.as_mut_slice();
        for bpos in 0..n {
            let vb = ws.varpi[bpos];
            acc[uidx[bpos]] += vb * ws.c[bpos];
            if vb == 0.0 {
                continue;
            }
            let k = uidx[bpos];
            for (dst, &src) in buf[k * q..(k + 1) * q].iter_mut().zip(&acc) {
                *dst += vb * src;
            }
        }
    }
    let upper = lower.transpose();
    let total = blocks.total();
    {
        let dense = sigma.as_mut_slice();
        for j in 0..q {
            let col = &mut dense[(u0 + j) * total + u0..(u0 + j) * total + u0 + q];
            let l = &lower.as_slice()[j * q..(j + 1) * q];
            let t = &upper.as_slice()[j * q..(j + 1) * q];
            for ((dst, a), b) in col.iter_mut().zip(l).zip(t) {
                *dst -= a + b;
            }
        }
    }
    for bpos in 0..n {
        let k = u0 + uidx[bpos];
        sigma[(k, k)] += ws.varpi[bpos] * ws.varpi[bpos] * ws.c[bpos];
    }

    // Frailty prior D(theta)^{-1}.
    match params.structure {
        CovStructure::Constant => {
            for k in 0..q {
                sigma[(u0 + k, u0 + k)] += 1.0 / params.theta;
            }
        }
        CovStructure::Ar1 => {
            frailty::ar1_add_g_inv(&mut sigma, u0, &view.subject_sizes, params.rho, 1.0 / params.theta);
        }
    }

    // Mirror the fixed-effect / u couplings; the (u,u) block is symmetric by
    // construction.
    for i in 0..b0 + p {
        for k in u0..u0 + q {
            sigma[(k, i)] = sigma[(i, k)];
        }
    }
    let mut fixed = sigma.view((0, 0), (b0 + p, b0 + p)).clone_owned();
    symmetrize(&mut fixed);
    sigma.view_mut((0, 0), (b0 + p, b0 + p)).copy_from(&fixed);
    InfoMatrix::new(sigma, blocks.clone())
}

/// Observed information `Sigma = -d^2 l / dOmega dOmega^T` with its block
/// layout and a lazily computed Cholesky factor.
#[derive(Debug, Clone)]
pub struct InfoMatrix {
    pub sigma: DMatrix<f64>,
    pub blocks: Blocks,
    chol: OnceLock<Cholesky>,
}

impl InfoMatrix {
    pub fn new(sigma: DMatrix<f64>, blocks: Blocks) -> Self {
        assert_eq!(sigma.nrows(), blocks.total());
        Self {
            sigma,
            blocks,
            chol: OnceLock::new(),
        }
    }

    /// Cholesky factor of `Sigma`, with ridge escalation on failure.
    pub fn cholesky(&self) -> Result<&Cholesky> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let c = Cholesky::with_ridge(&self.sigma)?;
        Ok(self.chol.get_or_init(|| c))
    }

    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> DMatrix<f64> {
        self.sigma
            .view((rows.start, cols.start), (rows.len(), cols.len()))
            .clone_owned()
    }

    /// `zeta_{alpha,alpha}`.
    pub fn alpha_alpha(&self) -> DMatrix<f64> {
        self.block(self.blocks.alpha.clone(), self.blocks.alpha.clone())
    }

    /// `zeta_{beta,beta}`.
    pub fn beta_beta(&self) -> DMatrix<f64> {
        self.block(self.blocks.beta.clone(), self.blocks.beta.clone())
    }

    /// `zeta_{u,u}`.
    pub fn u_u(&self) -> DMatrix<f64> {
        self.block(self.blocks.u.clone(), self.blocks.u.clone())
    }
}

/// `Sigma^{-1} rhs` through the Cholesky factor.
pub fn chol_solve(info: &InfoMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(info.cholesky()?.solve(rhs))
}

/// `Sigma^{-1} RHS` for a matrix right-hand side.
pub fn chol_solve_mat(info: &InfoMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(info.cholesky()?.solve_mat(rhs))
}

/// `Sigma*_{u,u}`, the `(u,u)` block of `Sigma^{-1}`.
pub fn inverse_block_uu(info: &InfoMatrix) -> Result<DMatrix<f64>> {
    let x = info.cholesky()?.trailing_inverse_factor(info.blocks.u.start);
    Ok(x.tr_mul(&x))
}

/// `tr(Sigma*_{u,u})` without forming the block.
pub fn inverse_trace_uu(info: &InfoMatrix) -> Result<f64> {
    Ok(info.cholesky()?.trailing_inverse_trace(info.blocks.u.start))
}

/// `Sigma*_{q}`: the `(alpha, beta)` block of `Sigma^{-1}`.
pub fn inverse_block_fixed(info: &InfoMatrix) -> Result<DMatrix<f64>> {
    Ok(info.cholesky()?.inverse_block(info.blocks.fixed()))
}
