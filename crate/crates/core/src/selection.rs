//! Penalized least-squares approximation around the unpenalized fit, BIC
//! tuning over a two-dimensional grid, and the LQA sandwich covariance.
//!
//! The quadratic surrogate is `(w - w~)^T M (w - w~) + n sum phi(|w_j|)`,
//! minimized one block at a time with `M` the incidence or latency block of
//! the observed information at the unpenalized estimate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{order_records, risk_sets, RecurrentDataset};
use crate::em::{fit_unpenalized_view, FitOptions, UnpenalizedFit};
use crate::error::{Error, Result};
use crate::likelihood::{inverse_block_fixed, Blocks, CovStructure, InfoMatrix};
use crate::linalg::Cholesky;
use crate::penalty::{alasso_weights, lqa_diag, penalty_value, PenaltyKind, PenaltySpec, Submodel, DEFAULT_LQA_EPS};

/// Coefficients smaller than this inside the LQA iterations become exact
/// zeros and leave the active set.
pub const ZERO_THRESHOLD: f64 = 1e-4;
const LSA_TOL: f64 = 1e-8;
const LSA_MAX_ITER: usize = 100;
pub const DEFAULT_GRID_POINTS: usize = 25;
/// Smallest grid value as a fraction of the largest.
pub const GRID_SPAN: f64 = 1e-4;

/// Quadratic surrogate of the penalized objective at the unpenalized fit.
#[derive(Debug, Clone)]
pub struct LSAProblem {
    /// `(alpha, beta, u)` at the unpenalized maximum.
    pub omega_tilde: DVector<f64>,
    pub blocks: Blocks,
    /// Precision weight of the incidence block, intercept first.
    pub weight_alpha: DMatrix<f64>,
    pub weight_beta: DMatrix<f64>,
    /// Per-record precision of `(alpha, beta)` with `u` profiled out, used by
    /// the BIC.
    pub info_q: DMatrix<f64>,
    pub spec: PenaltySpec,
    /// Scale of the penalty term (number of records).
    pub n: usize,
}

impl LSAProblem {
    pub fn new(omega_tilde: DVector<f64>, info: &InfoMatrix, spec: PenaltySpec, n: usize) -> Result<Self> {
        let blocks = info.blocks.clone();
        if omega_tilde.len() != blocks.total() {
            return Err(Error::Dimension(format!(
                "estimate has {} entries, information has {}",
                omega_tilde.len(),
                blocks.total()
            )));
        }
        if spec.weights_alpha.len() + 1 != blocks.alpha.len() || spec.weights_beta.len() != blocks.beta.len() {
            return Err(Error::Dimension("penalty weights do not match the fixed effects".into()));
        }
        if n == 0 {
            return Err(Error::config("n", "penalty scale must be positive"));
        }
        spec.validate()?;
        let cov_q = inverse_block_fixed(info)?;
        let info_q = Cholesky::with_ridge(&cov_q)?.inverse() / n as f64;
        Ok(Self {
            weight_alpha: info.alpha_alpha(),
            weight_beta: info.beta_beta(),
            omega_tilde,
            blocks,
            info_q,
            spec,
            n,
        })
    }

    /// Unpenalized `(alpha, beta)`.
    pub fn fixed_tilde(&self) -> DVector<f64> {
        self.omega_tilde.rows(0, self.blocks.fixed().len()).clone_owned()
    }

    fn block(&self, which: Submodel) -> (&DMatrix<f64>, DVector<f64>) {
        let range = match which {
            Submodel::Incidence => self.blocks.alpha.clone(),
            Submodel::Latency => self.blocks.beta.clone(),
        };
        let w = match which {
            Submodel::Incidence => &self.weight_alpha,
            Submodel::Latency => &self.weight_beta,
        };
        (w, self.omega_tilde.rows(range.start, range.len()).clone_owned())
    }

    fn spec_at(&self, which: Submodel, kappa: f64) -> PenaltySpec {
        let mut spec = self.spec.clone();
        match which {
            Submodel::Incidence => spec.kappa1 = kappa,
            Submodel::Latency => spec.kappa2 = kappa,
        }
        spec
    }

    /// Smallest `kappa` at which the all-zero block (intercept re-optimized)
    /// satisfies the optimality conditions of the surrogate.
    pub fn kappa_threshold(&self, which: Submodel) -> f64 {
        let (m, tilde) = self.block(which);
        let target = m * &tilde;
        let offset = usize::from(which == Submodel::Incidence);
        let mut at_zero = DVector::zeros(tilde.len());
        if offset == 1 && m[(0, 0)] > 0.0 {
            at_zero[0] = target[0] / m[(0, 0)];
        }
        let grad = (m * &at_zero - &target) * 2.0;
        let weights = self.spec.weights(which);
        let n = self.n as f64;
        (offset..tilde.len())
            .map(|j| {
                let w = match self.spec.kind {
                    PenaltyKind::AdaptiveLasso => weights[j - offset],
                    _ => 1.0,
                };
                grad[j].abs() / (n * w)
            })
            .fold(0.0, f64::max)
    }
}

/// Minimizes the surrogate over one block at tuning level `kappa` by iterated
/// LQA ridge solves with hard zeroing.
pub fn lsa_fit_block(problem: &LSAProblem, which: Submodel, kappa: f64) -> Result<DVector<f64>> {
    let (m, tilde) = problem.block(which);
    if kappa == 0.0 || problem.spec.kind == PenaltyKind::None {
        return Ok(tilde);
    }
    let spec = problem.spec_at(which, kappa);
    let offset = usize::from(which == Submodel::Incidence);
    let target = m * &tilde;
    let half_n = 0.5 * problem.n as f64;
    let mut omega = tilde.clone();
    let mut active: Vec<usize> = (0..tilde.len()).collect();
    for _ in 0..LSA_MAX_ITER {
        let lqa = lqa_diag(&spec, &omega, which, DEFAULT_LQA_EPS);
        let k = active.len();
        let mut sys = DMatrix::from_fn(k, k, |a, b| m[(active[a], active[b])]);
        for (a, &j) in active.iter().enumerate() {
            sys[(a, a)] += half_n * lqa[j];
        }
        let rhs = DVector::from_fn(k, |a, _| target[active[a]]);
        let sol = if k == 0 { DVector::zeros(0) } else { Cholesky::with_ridge(&sys)?.solve(&rhs) };
        let mut next = DVector::zeros(omega.len());
        for (a, &j) in active.iter().enumerate() {
            next[j] = sol[a];
        }
        active.retain(|&j| {
            if j >= offset && next[j].abs() < ZERO_THRESHOLD {
                next[j] = 0.0;
                false
            } else {
                true
            }
        });
        let change = (&next - &omega).amax();
        omega = next;
        if change < LSA_TOL {
            break;
        }
    }
    coordinate_polish(m, &tilde, &spec, which, problem.n, &mut omega);
    Ok(omega)
}

const POLISH_TOL: f64 = 1e-13;
const POLISH_MAX_SWEEPS: usize = 10_000;

/// Exact minimizer of `q (x - z)^2 + n phi(|x|)` over the real line.
fn scalar_minimizer(q: f64, z: f64, n: f64, spec: &PenaltySpec, which: Submodel, index: usize) -> f64 {
    let kappa = spec.kappa(which);
    let objective = |x: f64| q * (x - z) * (x - z) + n * penalty_value(spec, x, which, index);
    let sign = if z < 0.0 { -1.0 } else { 1.0 };
    let az = z.abs();
    let mut candidates = vec![0.0];
    match spec.kind {
        PenaltyKind::None => candidates.push(z),
        PenaltyKind::AdaptiveLasso => {
            let w = spec.weights(which)[index];
            candidates.push(sign * (az - n * kappa * w / (2.0 * q)).max(0.0));
        }
        PenaltyKind::Scad => {
            let a = spec.scad_a;
            // lasso region, then the quadratic blend, then the flat region
            candidates.push(sign * (az - n * kappa / (2.0 * q)).clamp(0.0, kappa));
            let curv = 2.0 * q - n / (a - 1.0);
            if curv > 0.0 {
                let x = (2.0 * q * az - n * a * kappa / (a - 1.0)) / curv;
                candidates.push(sign * x.clamp(kappa, a * kappa));
            }
            candidates.push(sign * kappa);
            candidates.push(sign * a * kappa);
            candidates.push(sign * az.max(a * kappa));
        }
    }
    let mut best = (objective(0.0), 0.0);
    for x in candidates {
        let v = objective(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    best.1
}

/// Cyclic coordinate descent on the block surrogate, started from the LQA
/// solution; every coordinate update is an exact scalar minimization.
fn coordinate_polish(m: &DMatrix<f64>, tilde: &DVector<f64>, spec: &PenaltySpec, which: Submodel, n: usize, omega: &mut DVector<f64>) {
    let offset = usize::from(which == Submodel::Incidence);
    let n = n as f64;
    let mut dev = &*omega - tilde;
    // m * dev, kept current across updates
    let mut grad = m * &dev;
    for _ in 0..POLISH_MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for j in 0..omega.len() {
            let q = m[(j, j)];
            if q <= 0.0 {
                continue;
            }
            // minimize q (x - z)^2 + penalty over coordinate j
            let z = omega[j] - grad[j] / q;
            let x = if j < offset { z } else { scalar_minimizer(q, z, n, spec, which, j - offset) };
            let step = x - omega[j];
            if step != 0.0 {
                omega[j] = x;
                dev[j] += step;
                grad.axpy(step, &m.column(j), 1.0);
                change = change.max(step.abs());
            }
        }
        if change < POLISH_TOL {
            break;
        }
    }
}

/// Number of nonzero fixed effects; entry 0 is the intercept and always
/// counts.
pub fn count_nonzero(fixed: &DVector<f64>) -> usize {
    1 + fixed.iter().skip(1).filter(|v| **v != 0.0).count()
}

/// `dev^T info_q dev + log(n) v / n` with `dev = hat - tilde` over the fixed
/// effects `(alpha, beta)`.
pub fn bic_score(hat: &DVector<f64>, tilde: &DVector<f64>, info_q: &DMatrix<f64>, n: usize) -> f64 {
    let dev = hat - tilde;
    let n = n as f64;
    dev.dot(&(info_q * &dev)) + n.ln() * count_nonzero(hat) as f64 / n
}

/// Tuning values for the incidence and latency penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaGrid {
    pub kappa1_values: Vec<f64>,
    pub kappa2_values: Vec<f64>,
}

impl KappaGrid {
    /// `points` geometric values per axis from `max * 1e-4` to `max`.
    pub fn geometric(max1: f64, max2: f64, points: usize) -> Self {
        let axis = |max: f64| -> Vec<f64> {
            if points == 1 {
                return vec![max];
            }
            let lo = max * GRID_SPAN;
            (0..points)
                .map(|k| lo * (max / lo).powf(k as f64 / (points - 1) as f64))
                .collect()
        };
        Self {
            kappa1_values: axis(max1),
            kappa2_values: axis(max2),
        }
    }

    /// Default grid for a problem: each axis tops out at twice the level that
    /// zeroes the whole block.
    pub fn for_problem(problem: &LSAProblem, points: usize) -> Self {
        let top = |which| {
            let t = problem.kappa_threshold(which);
            if t > 0.0 {
                2.0 * t
            } else {
                1.0
            }
        };
        Self::geometric(top(Submodel::Incidence), top(Submodel::Latency), points)
    }

    pub fn single(kappa1: f64, kappa2: f64) -> Self {
        Self {
            kappa1_values: vec![kappa1],
            kappa2_values: vec![kappa2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("kappa1", &self.kappa1_values), ("kappa2", &self.kappa2_values)] {
            if axis.is_empty() {
                return Err(Error::config(name, "grid axis is empty"));
            }
            if axis.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
                return Err(Error::config(name, "grid values must be nonnegative and finite"));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(name, "grid values must be strictly ascending"));
            }
        }
        Ok(())
    }
}

/// How the tuning grid is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum GridRequest {
    /// Data-driven geometric grid with this many points per axis.
    Auto { points: usize },
    Explicit(KappaGrid),
}

impl Default for GridRequest {
    fn default() -> Self {
        GridRequest::Auto {
            points: DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicPoint {
    pub kappa1: f64,
    pub kappa2: f64,
    pub bic: f64,
    /// Nonzero fixed effects including the intercept.
    pub nonzero: usize,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// `(alpha, beta, u)`; `u` is the unpenalized prediction.
    pub omega_hat: DVector<f64>,
    pub kappa_star: (f64, f64),
    pub bic_path: Vec<BicPoint>,
    /// Covariance of `(alpha, beta)`, zero rows and columns for zeroed
    /// coefficients. Filled by [`select_from_fit`].
    pub sandwich_cov: Option<DMatrix<f64>>,
    pub ase: Option<DVector<f64>>,
}

fn better(candidate: &BicPoint, best: &BicPoint) -> bool {
    // ties go to the sparser, larger-kappa model
    candidate.bic < best.bic
        || (candidate.bic == best.bic && (candidate.kappa1, candidate.kappa2) > (best.kappa1, best.kappa2))
}

/// Exhaustive BIC search. The two blocks are fitted independently per axis
/// value, then every pair is scored.
pub fn grid_search_kappa(problem: &LSAProblem, grid: &KappaGrid) -> Result<SelectionResult> {
    grid.validate()?;
    let alpha_fits = grid
        .kappa1_values
        .par_iter()
        .map(|&k| lsa_fit_block(problem, Submodel::Incidence, k))
        .collect::<Result<Vec<_>>>()?;
    let beta_fits = grid
        .kappa2_values
        .par_iter()
        .map(|&k| lsa_fit_block(problem, Submodel::Latency, k))
        .collect::<Result<Vec<_>>>()?;
    let tilde = problem.fixed_tilde();
    let nf = tilde.len();
    let na = problem.blocks.alpha.len();
    let mut path = Vec::with_capacity(alpha_fits.len() * beta_fits.len());
    let mut best: Option<(usize, usize)> = None;
    for (i, a) in alpha_fits.iter().enumerate() {
        for (j, b) in beta_fits.iter().enumerate() {
            let mut hat = DVector::zeros(nf);
            hat.rows_mut(0, na).copy_from(a);
            hat.rows_mut(na, nf - na).copy_from(b);
            let point = BicPoint {
                kappa1: grid.kappa1_values[i],
                kappa2: grid.kappa2_values[j],
                bic: bic_score(&hat, &tilde, &problem.info_q, problem.n),
                nonzero: count_nonzero(&hat),
            };
            if best.is_none_or(|(bi, bj)| better(&point, &path[bi * beta_fits.len() + bj])) {
                best = Some((i, j));
            }
            path.push(point);
        }
    }
    let (bi, bj) = best.expect("grid is nonempty");
    let mut omega_hat = problem.omega_tilde.clone();
    omega_hat.rows_mut(0, na).copy_from(&alpha_fits[bi]);
    omega_hat.rows_mut(na, nf - na).copy_from(&beta_fits[bj]);
    Ok(SelectionResult {
        omega_hat,
        kappa_star: (grid.kappa1_values[bi], grid.kappa2_values[bj]),
        bic_path: path,
        sandwich_cov: None,
        ase: None,
    })
}

/// Sandwich covariance of the penalized fixed effects.
#[derive(Debug, Clone)]
pub struct Sandwich {
    /// `(alpha, beta)` covariance; zero rows and columns for zeroed
    /// coefficients.
    pub cov: DMatrix<f64>,
    pub ase: DVector<f64>,
    /// Ridge the penalized Hessian needed (0 when clean).
    pub ridge: f64,
}

/// LQA sandwich `H^{-1} (Sigma + A) Sigma^{-1} (Sigma + A) H^{-1}` with
/// `H = Sigma + n Psi`, evaluated on the system with zeroed coefficients
/// removed. `A` holds `1 / w_j^2` for the retained fixed effects including
/// the intercept; `Psi` holds the LQA weights of the penalized slopes.
pub fn sandwich_cov(omega_hat: &DVector<f64>, info: &InfoMatrix, spec: &PenaltySpec, n: usize) -> Result<Sandwich> {
    let blocks = &info.blocks;
    let nf = blocks.fixed().len();
    if omega_hat.len() != blocks.total() {
        return Err(Error::Dimension("estimate does not match the information matrix".into()));
    }
    let na = blocks.alpha.len();
    let alpha = omega_hat.rows(0, na).clone_owned();
    let beta = omega_hat.rows(na, nf - na).clone_owned();
    let psi_alpha = lqa_diag(spec, &alpha, Submodel::Incidence, DEFAULT_LQA_EPS);
    let psi_beta = lqa_diag(spec, &beta, Submodel::Latency, DEFAULT_LQA_EPS);
    let kept_fixed: Vec<usize> = (0..nf).filter(|&j| omega_hat[j] != 0.0).collect();
    let keep: Vec<usize> = kept_fixed.iter().copied().chain(blocks.u.clone()).collect();
    let r = keep.len();
    let kf = kept_fixed.len();
    let sigma = DMatrix::from_fn(r, r, |a, b| info.sigma[(keep[a], keep[b])]);
    let mut h = sigma.clone();
    let mut sigma_a = sigma.clone();
    let nn = n as f64;
    for (a, &j) in kept_fixed.iter().enumerate() {
        let psi = if j < na { psi_alpha[j] } else { psi_beta[j - na] };
        h[(a, a)] += nn * psi;
        sigma_a[(a, a)] += 1.0 / (omega_hat[j] * omega_hat[j]);
    }
    let h_chol = Cholesky::with_ridge(&h)?;
    let s_chol = Cholesky::with_ridge(&sigma)?;
    let e = DMatrix::from_fn(r, kf, |a, b| if a == b { 1.0 } else { 0.0 });
    let y = &sigma_a * h_chol.solve_mat(&e);
    let reduced = y.tr_mul(&s_chol.solve_mat(&y));
    let mut cov = DMatrix::zeros(nf, nf);
    for (a, &i) in kept_fixed.iter().enumerate() {
        for (b, &j) in kept_fixed.iter().enumerate() {
            cov[(i, j)] = 0.5 * (reduced[(a, b)] + reduced[(b, a)]);
        }
    }
    let ase = DVector::from_fn(nf, |j, _| if omega_hat[j] == 0.0 { 0.0 } else { cov[(j, j)].max(0.0).sqrt() });
    Ok(Sandwich {
        cov,
        ase,
        ridge: h_chol.ridge(),
    })
}

/// Penalized fit: the unpenalized EM fit plus the selected penalized
/// estimate.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub unpenalized: UnpenalizedFit,
    pub selection: SelectionResult,
    /// Penalty at the selected tuning pair, with the weights used.
    pub spec: PenaltySpec,
    pub n: usize,
    pub structure: CovStructure,
}

impl FitResult {
    pub fn alpha_hat(&self) -> DVector<f64> {
        let b = &self.unpenalized.info.blocks;
        self.selection.omega_hat.rows(b.alpha.start, b.alpha.len()).clone_owned()
    }

    pub fn beta_hat(&self) -> DVector<f64> {
        let b = &self.unpenalized.info.blocks;
        self.selection.omega_hat.rows(b.beta.start, b.beta.len()).clone_owned()
    }

    pub fn theta(&self) -> f64 {
        self.unpenalized.state.params.theta
    }

    pub fn rho(&self) -> f64 {
        self.unpenalized.state.params.rho
    }

    /// Standard errors of `(alpha, beta)`.
    pub fn ase(&self) -> &DVector<f64> {
        self.selection.ase.as_ref().expect("filled by select_from_fit")
    }
}

/// Penalty specification for `kind` built from an unpenalized fit: adaptive
/// weights from its fixed effects, unit weights otherwise.
pub fn penalty_for_fit(kind: PenaltyKind, fit: &UnpenalizedFit) -> PenaltySpec {
    let p = &fit.state.params;
    let mut spec = PenaltySpec::new(kind, p.alpha.len() - 1, p.beta.len());
    if kind == PenaltyKind::AdaptiveLasso {
        let (wa, wb) = alasso_weights(&p.alpha, &p.beta, spec.weight_floor);
        spec.weights_alpha = wa;
        spec.weights_beta = wb;
    }
    spec
}

/// Tuning search and sandwich covariance on top of an existing unpenalized
/// fit. `n` is the number of records.
pub fn select_from_fit(fit: &UnpenalizedFit, kind: PenaltyKind, n: usize, grid: &GridRequest) -> Result<(SelectionResult, PenaltySpec)> {
    let spec = penalty_for_fit(kind, fit);
    let omega = fit.state.params.omega();
    if kind == PenaltyKind::None {
        let cov = inverse_block_fixed(&fit.info).map_err(|e| e.in_stage("covariance"))?;
        let ase = cov.diagonal().map(|v| v.max(0.0).sqrt());
        let nf = fit.info.blocks.fixed().len();
        let fixed = omega.rows(0, nf).clone_owned();
        let selection = SelectionResult {
            bic_path: vec![BicPoint {
                kappa1: 0.0,
                kappa2: 0.0,
                bic: {
                    let nn = n as f64;
                    nn.ln() * count_nonzero(&fixed) as f64 / nn
                },
                nonzero: count_nonzero(&fixed),
            }],
            omega_hat: omega,
            kappa_star: (0.0, 0.0),
            sandwich_cov: Some(cov),
            ase: Some(ase),
        };
        return Ok((selection, spec));
    }
    let problem = LSAProblem::new(omega, &fit.info, spec, n).map_err(|e| e.in_stage("selection"))?;
    let grid = match grid {
        GridRequest::Auto { points } => {
            if *points == 0 {
                return Err(Error::config("grid_size", "need at least one grid point"));
            }
            KappaGrid::for_problem(&problem, *points)
        }
        GridRequest::Explicit(g) => g.clone(),
    };
    let mut selection = grid_search_kappa(&problem, &grid).map_err(|e| e.in_stage("selection"))?;
    let spec = problem.spec.clone().with_kappa(selection.kappa_star.0, selection.kappa_star.1);
    let sw = sandwich_cov(&selection.omega_hat, &fit.info, &spec, n).map_err(|e| e.in_stage("covariance"))?;
    if sw.ridge > 0.0 {
        log::warn!("sandwich: penalized Hessian needed ridge {:e}", sw.ridge);
    }
    selection.sandwich_cov = Some(sw.cov);
    selection.ase = Some(sw.ase);
    Ok((selection, spec))
}

/// Unpenalized EM fit, adaptive weights when needed, BIC tuning search and
/// sandwich covariance.
pub fn fit_penalized(
    data: &RecurrentDataset,
    structure: CovStructure,
    kind: PenaltyKind,
    opts: &FitOptions,
    grid: &GridRequest,
) -> Result<FitResult> {
    let view = order_records(data);
    let risk = risk_sets(&view);
    let fit = fit_unpenalized_view(&view, &risk, structure, opts).map_err(|e| e.in_stage("unpenalized fit"))?;
    let (selection, spec) = select_from_fit(&fit, kind, data.n(), grid)?;
    Ok(FitResult {
        unpenalized: fit,
        selection,
        spec,
        n: data.n(),
        structure,
    })
}
