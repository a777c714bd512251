//! Monte Carlo design: correlated covariates, shared-frailty cure data with
//! Weibull gap times, oracle fits and selection/accuracy metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rayon::prelude::*;

use crate::data::{RecordRow, RecurrentDataset};
use crate::em::{fit_unpenalized, FitOptions, UnpenalizedFit, VarianceMethod};
use crate::error::{Error, Result};
use crate::likelihood::{expit, CovStructure};
use crate::penalty::PenaltyKind;
use crate::selection::{select_from_fit, GridRequest};

/// Weibull baseline pairs calibrated to the two censoring levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Censoring {
    /// `(mu, tau) = (0.8, 0.3)`.
    Low25,
    /// `(mu, tau) = (0.02, 0.8)`.
    High40,
}

impl Censoring {
    pub fn weibull(self) -> (f64, f64) {
        match self {
            Censoring::Low25 => (0.8, 0.3),
            Censoring::High40 => (0.02, 0.8),
        }
    }

    pub fn percent(self) -> u32 {
        match self {
            Censoring::Low25 => 25,
            Censoring::High40 => 40,
        }
    }

    pub fn from_percent(p: u32) -> Result<Self> {
        match p {
            25 => Ok(Censoring::Low25),
            40 => Ok(Censoring::High40),
            other => Err(Error::config("censoring", format!("expected 25 or 40, got {other}"))),
        }
    }
}

pub const TRUE_ALPHA: [f64; 9] = [1.2, -0.8, 0.6, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
pub const TRUE_BETA: [f64; 8] = [-1.5, 0.0, 0.0, 1.5, 0.0, 0.9, 0.0, 0.0];
/// Zero-based covariate columns of the true incidence support (x1, x2, x6).
pub const ORACLE_INCIDENCE: [usize; 3] = [0, 1, 5];
/// Zero-based covariate columns of the true latency support (x1, x4, x6).
pub const ORACLE_LATENCY: [usize; 3] = [0, 3, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub m: usize,
    pub max_records: usize,
    pub follow_up: f64,
    pub phi: f64,
    /// Intercept first.
    pub alpha_true: DVector<f64>,
    pub beta_true: DVector<f64>,
    pub weibull_mu: f64,
    pub weibull_tau: f64,
    pub theta: f64,
    pub structure: CovStructure,
    pub rho: f64,
    pub replications: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn paper(m: usize, theta: f64, censoring: Censoring, seed: u64) -> Self {
        let (mu, tau) = censoring.weibull();
        Self {
            m,
            max_records: 5,
            follow_up: 2000.0,
            phi: 0.5,
            alpha_true: DVector::from_row_slice(&TRUE_ALPHA),
            beta_true: DVector::from_row_slice(&TRUE_BETA),
            weibull_mu: mu,
            weibull_tau: tau,
            theta,
            structure: CovStructure::Constant,
            rho: 0.0,
            replications: 100,
            seed,
        }
    }

    pub fn d(&self) -> usize {
        self.alpha_true.len() - 1
    }

    pub fn p(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m", "need at least one subject"));
        }
        if self.max_records == 0 {
            return Err(Error::config("max_records", "need at least one record per subject"));
        }
        if self.d() != self.p() {
            return Err(Error::config("beta_true", "covariates are shared, so d must equal p"));
        }
        if !(self.phi.abs() < 1.0) || (self.d() > 1 && self.phi <= -1.0 / (self.d() as f64 - 1.0)) {
            return Err(Error::config("phi", format!("equicorrelation {} is not positive definite", self.phi)));
        }
        if !(self.weibull_mu > 0.0 && self.weibull_tau > 0.0) {
            return Err(Error::config("weibull", "mu and tau must be positive"));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::config("theta", format!("must be nonnegative, got {}", self.theta)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::config("rho", format!("must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.follow_up > 0.0) {
            return Err(Error::config("follow_up", "must be positive"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "need at least one replication"));
        }
        Ok(())
    }

    /// Generator for replication `rep`: the seed fixes the key, the
    /// replication selects the stream.
    pub fn replication_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Unobserved quantities behind one generated dataset, canonical row order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    /// 1 = susceptible.
    pub uncured: Vec<bool>,
    /// `+inf` for cured records.
    pub event_time: Vec<f64>,
    pub censor_time: Vec<f64>,
    /// Per subject (constant) or per record (AR(1)).
    pub frailty: Vec<f64>,
    /// Incidence probability of each record.
    pub pi: Vec<f64>,
}

/// Equicorrelated standard normal rows via the Cholesky factor.
pub fn gen_covariates(m: usize, d: usize, phi: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let corr = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { phi });
    let l = corr.cholesky().expect("equicorrelation is positive definite").unpack();
    let z = DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * l.transpose()
}

/// Draws one dataset per the simulation design.
pub fn gen_dataset(cfg: &SimConfig, rng: &mut impl Rng) -> Result<(RecurrentDataset, LatentTruth)> {
    cfg.validate()?;
    let d = cfg.d();
    let x = gen_covariates(cfg.m, d, cfg.phi, rng);
    let sd = cfg.theta.sqrt();
    let mut rows = Vec::new();
    let mut truth = LatentTruth {
        uncured: Vec::new(),
        event_time: Vec::new(),
        censor_time: Vec::new(),
        frailty: Vec::new(),
        pi: Vec::new(),
    };
    let xa = &x * cfg.alpha_true.rows(1, d);
    let zb = &x * &cfg.beta_true;
    for i in 0..cfg.m {
        let ni = rng.random_range(1..=cfg.max_records);
        let shared: f64 = sd * rng.sample::<f64, _>(StandardNormal);
        let mut prev = 0.0;
        for j in 0..ni {
            let u = match cfg.structure {
                CovStructure::Constant => shared,
                CovStructure::Ar1 => {
                    let innov: f64 = sd * rng.sample::<f64, _>(StandardNormal);
                    let v = if j == 0 {
                        innov / (1.0 - cfg.rho * cfg.rho).sqrt()
                    } else {
                        cfg.rho * prev + innov
                    };
                    prev = v;
                    v
                }
            };
            let pi = expit(cfg.alpha_true[0] + xa[i] + u);
            let uncured = rng.random_bool(pi);
            let a = if uncured {
                let v: f64 = 1.0 - rng.random::<f64>();
                (-v.ln() / (cfg.weibull_mu * (zb[i] + u).exp())).powf(1.0 / cfg.weibull_tau)
            } else {
                f64::INFINITY
            };
            let c = rng.random_range(0.0..cfg.follow_up);
            rows.push(RecordRow {
                subject_id: i as i64 + 1,
                event_index: j as u32 + 1,
                gap_time: a.min(c),
                status: a <= c,
            });
            truth.uncured.push(uncured);
            truth.event_time.push(a);
            truth.censor_time.push(c);
            truth.pi.push(pi);
            if cfg.structure == CovStructure::Ar1 || j == 0 {
                truth.frailty.push(u);
            }
        }
    }
    let names: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    let ids = (1..=cfg.m as i64).collect();
    let data = RecurrentDataset::new(rows, ids, x.clone(), x, names.clone(), names)?;
    Ok((data, truth))
}

/// Restricts the fit to the true support. Simulation only.
pub fn oracle_fit(data: &RecurrentDataset, structure: CovStructure, opts: &FitOptions) -> Result<UnpenalizedFit> {
    let reduced = data.select_columns(&ORACLE_INCIDENCE, &ORACLE_LATENCY)?;
    fit_unpenalized(&reduced, structure, opts)
}

/// Estimators compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Unpenalized REML fit on the true support.
    Oracle,
    AdaptiveLasso,
    Scad,
    /// Adaptive lasso on top of ML variance components.
    AdaptiveLassoMl,
    ScadMl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Oracle,
        Method::AdaptiveLasso,
        Method::Scad,
        Method::AdaptiveLassoMl,
        Method::ScadMl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::AdaptiveLasso => "alasso",
            Method::Scad => "scad",
            Method::AdaptiveLassoMl => "alasso_ml",
            Method::ScadMl => "scad_ml",
        }
    }

    pub fn penalty(self) -> Option<PenaltyKind> {
        match self {
            Method::Oracle => None,
            Method::AdaptiveLasso | Method::AdaptiveLassoMl => Some(PenaltyKind::AdaptiveLasso),
            Method::Scad | Method::ScadMl => Some(PenaltyKind::Scad),
        }
    }

    pub fn variance(self) -> VarianceMethod {
        match self {
            Method::AdaptiveLassoMl | Method::ScadMl => VarianceMethod::Ml,
            _ => VarianceMethod::Reml,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::config("methods", format!("unknown method `{key}`; expected oracle|alasso|scad|alasso_ml|scad_ml")))
    }
}

/// One method's estimates on one replication, padded to the full covariate
/// dimensions (entries outside a restricted support are exactly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationFit {
    pub method: Method,
    /// Intercept first.
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub ase_alpha: DVector<f64>,
    pub ase_beta: DVector<f64>,
    pub theta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelMetrics {
    /// Mean count of true-zero slopes estimated as zero.
    pub correct: f64,
    /// Mean count of true-nonzero slopes estimated as zero.
    pub incorrect: f64,
    pub mse: f64,
}

/// Mean, mean reported standard error and empirical standard error of one
/// coefficient with a nonzero true value.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub ase: f64,
    pub ese: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyMetrics {
    pub replications: usize,
    pub incidence: SubmodelMetrics,
    pub latency: SubmodelMetrics,
    pub coefficients: Vec<CoefficientSummary>,
    pub mean_theta: f64,
}

/// `devᵀ Ψ dev` with unit variances and constant correlation `phi`.
fn equicorrelation_form(dev: &[f64], phi: f64) -> f64 {
    let sum: f64 = dev.iter().sum();
    let sq: f64 = dev.iter().map(|v| v * v).sum();
    (1.0 - phi) * sq + phi * sum * sum
}

fn submodel_metrics(fits: &[ReplicationFit], truth: &[f64], pick: impl Fn(&ReplicationFit) -> &[f64], phi: f64) -> SubmodelMetrics {
    let r = fits.len() as f64;
    let (mut correct, mut incorrect, mut mse) = (0.0, 0.0, 0.0);
    for f in fits {
        let est = pick(f);
        for (e, t) in est.iter().zip(truth) {
            if *e == 0.0 {
                if *t == 0.0 {
                    correct += 1.0;
                } else {
                    incorrect += 1.0;
                }
            }
        }
        let dev: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e - t).collect();
        mse += equicorrelation_form(&dev, phi);
    }
    SubmodelMetrics {
        correct: correct / r,
        incorrect: incorrect / r,
        mse: mse / r,
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Selection and accuracy summaries over successful replications. Slopes
/// only for the zero counts and the quadratic error; the intercept appears
/// in the coefficient summaries.
pub fn compute_metrics(fits: &[ReplicationFit], cfg: &SimConfig) -> Result<StudyMetrics> {
    if fits.is_empty() {
        return Err(Error::config("replications", "no successful replication to summarize"));
    }
    let d = cfg.d();
    for f in fits {
        if f.alpha.len() != d + 1 || f.beta.len() != cfg.p() {
            return Err(Error::Dimension(format!(
                "replication estimates have ({}, {}) coefficients, config has ({}, {})",
                f.alpha.len(),
                f.beta.len(),
                d + 1,
                cfg.p()
            )));
        }
    }
    let alpha_slopes: Vec<f64> = cfg.alpha_true.iter().skip(1).copied().collect();
    let incidence = submodel_metrics(fits, &alpha_slopes, |f| &f.alpha.as_slice()[1..], cfg.phi);
    let latency = submodel_metrics(fits, cfg.beta_true.as_slice(), |f| f.beta.as_slice(), cfg.phi);

    let mut coefficients = Vec::new();
    let mut summarize = |name: String, truth: f64, est: Vec<f64>, ase: Vec<f64>| {
        let (mean, ese) = mean_sd(&est);
        coefficients.push(CoefficientSummary {
            name,
            truth,
            mean,
            ase: ase.iter().sum::<f64>() / ase.len() as f64,
            ese,
        });
    };
    for (j, &t) in cfg.alpha_true.iter().enumerate() {
        if t != 0.0 {
            summarize(format!("alpha{j}"), t, fits.iter().map(|f| f.alpha[j]).collect(), fits.iter().map(|f| f.ase_alpha[j]).collect());
        }
    }
    for (j, &t) in cfg.beta_true.iter().enumerate() {
        if t != 0.0 {
            summarize(format!("beta{}", j + 1), t, fits.iter().map(|f| f.beta[j]).collect(), fits.iter().map(|f| f.ase_beta[j]).collect());
        }
    }
    let mean_theta = fits.iter().map(|f| f.theta).sum::<f64>() / fits.len() as f64;
    Ok(StudyMetrics {
        replications: fits.len(),
        incidence,
        latency,
        coefficients,
        mean_theta,
    })
}

/// Everything produced for one replication.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub censoring_rate: f64,
    /// One entry per requested method: the fit or the failure message.
    pub fits: Vec<(Method, std::result::Result<ReplicationFit, String>)>,
}

/// Study-level options shared by every replication.
#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    pub fit: FitOptions,
    pub grid: GridRequest,
}

fn pad(values: &DVector<f64>, cols: &[usize], len: usize, offset: usize) -> DVector<f64> {
    let mut out = DVector::zeros(len);
    for k in 0..offset {
        out[k] = values[k];
    }
    for (k, &c) in cols.iter().enumerate() {
        out[c + offset] = values[k + offset];
    }
    out
}

fn converged(fit: UnpenalizedFit) -> std::result::Result<UnpenalizedFit, String> {
    if fit.state.converged {
        Ok(fit)
    } else {
        Err(format!("EM did not converge in {} iterations", fit.state.iterations))
    }
}

fn oracle_replication(data: &RecurrentDataset, cfg: &SimConfig, opts: &StudyOptions) -> std::result::Result<ReplicationFit, String> {
    let fit = oracle_fit(data, cfg.structure, &opts.fit).map_err(|e| e.to_string()).and_then(converged)?;
    let (sel, _) = select_from_fit(&fit, PenaltyKind::None, data.n(), &opts.grid).map_err(|e| e.to_string())?;
    let ase = sel.ase.expect("filled by select_from_fit");
    let na = ORACLE_INCIDENCE.len() + 1;
    let p = &fit.state.params;
    Ok(ReplicationFit {
        method: Method::Oracle,
        alpha: pad(&p.alpha, &ORACLE_INCIDENCE, cfg.d() + 1, 1),
        beta: pad(&p.beta, &ORACLE_LATENCY, cfg.p(), 0),
        ase_alpha: pad(&ase.rows(0, na).clone_owned(), &ORACLE_INCIDENCE, cfg.d() + 1, 1),
        ase_beta: pad(&ase.rows(na, ORACLE_LATENCY.len()).clone_owned(), &ORACLE_LATENCY, cfg.p(), 0),
        theta: p.theta,
        rho: p.rho,
    })
}

fn penalized_replication(
    fit: &std::result::Result<UnpenalizedFit, String>,
    method: Method,
    n: usize,
    opts: &StudyOptions,
) -> std::result::Result<ReplicationFit, String> {
    let fit = fit.as_ref().map_err(Clone::clone)?;
    let kind = method.penalty().expect("penalized method");
    let (sel, _) = select_from_fit(fit, kind, n, &opts.grid).map_err(|e| e.to_string())?;
    let ase = sel.ase.expect("filled by select_from_fit");
    let b = &fit.info.blocks;
    Ok(ReplicationFit {
        method,
        alpha: sel.omega_hat.rows(b.alpha.start, b.alpha.len()).clone_owned(),
        beta: sel.omega_hat.rows(b.beta.start, b.beta.len()).clone_owned(),
        ase_alpha: ase.rows(b.alpha.start, b.alpha.len()).clone_owned(),
        ase_beta: ase.rows(b.beta.start, b.beta.len()).clone_owned(),
        theta: fit.state.params.theta,
        rho: fit.state.params.rho,
    })
}

/// Generates replication `rep` and fits every requested method. The
/// REML and ML unpenalized fits are each shared by the penalties that use
/// them.
pub fn run_replication(cfg: &SimConfig, rep: usize, methods: &[Method], opts: &StudyOptions) -> Result<ReplicationOutcome> {
    let mut rng = cfg.replication_rng(rep);
    let (data, _) = gen_dataset(cfg, &mut rng)?;
    let censoring_rate = 1.0 - data.n_events() as f64 / data.n() as f64;
    let base_fit = |variance: VarianceMethod| {
        let o = FitOptions {
            variance_method: variance,
            ..opts.fit.clone()
        };
        fit_unpenalized(&data, cfg.structure, &o).map_err(|e| e.to_string()).and_then(converged)
    };
    let needs = |v: VarianceMethod| methods.iter().any(|m| m.penalty().is_some() && m.variance() == v);
    let reml = needs(VarianceMethod::Reml).then(|| base_fit(VarianceMethod::Reml));
    let ml = needs(VarianceMethod::Ml).then(|| base_fit(VarianceMethod::Ml));
    let fits = methods
        .iter()
        .map(|&m| {
            let res = match (m, m.variance()) {
                (Method::Oracle, _) => oracle_replication(&data, cfg, opts),
                (_, VarianceMethod::Reml) => penalized_replication(reml.as_ref().expect("requested"), m, data.n(), opts),
                (_, VarianceMethod::Ml) => penalized_replication(ml.as_ref().expect("requested"), m, data.n(), opts),
            };
            (m, res)
        })
        .collect();
    Ok(ReplicationOutcome {
        replication: rep,
        censoring_rate,
        fits,
    })
}

/// Per-method results of a study.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: Method,
    /// `None` when every replication failed.
    pub metrics: Option<StudyMetrics>,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub config: SimConfig,
    pub methods: Vec<MethodReport>,
    pub replications: Vec<ReplicationOutcome>,
    pub mean_censoring: f64,
}

impl StudyReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Compact configuration label for report rows.
    pub fn label(&self) -> String {
        config_label(&self.config)
    }

    /// Successful fits of one method in replication order.
    pub fn fits(&self, m: Method) -> Vec<&ReplicationFit> {
        self.replications
            .iter()
            .flat_map(|r| r.fits.iter())
            .filter(|(k, _)| *k == m)
            .filter_map(|(_, f)| f.as_ref().ok())
            .collect()
    }
}

pub fn config_label(cfg: &SimConfig) -> String {
    let mut s = format!("m{}_theta{}", cfg.m, cfg.theta);
    if cfg.structure == CovStructure::Ar1 {
        s.push_str(&format!("_rho{}", cfg.rho));
    }
    let cens = match (cfg.weibull_mu, cfg.weibull_tau) {
        (mu, tau) if (mu, tau) == Censoring::Low25.weibull() => "_c25".to_string(),
        (mu, tau) if (mu, tau) == Censoring::High40.weibull() => "_c40".to_string(),
        (mu, tau) => format!("_mu{mu}_tau{tau}"),
    };
    s + &cens
}

/// Runs every replication on the current rayon pool. Results depend only
/// on the configuration, not on scheduling.
pub fn run_study(cfg: &SimConfig, methods: &[Method], opts: &StudyOptions) -> Result<StudyReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::config("methods", "need at least one method"));
    }
    let replications: Vec<ReplicationOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, methods, opts))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for &m in methods {
        let mut ok = Vec::new();
        let mut failures = 0;
        for r in &replications {
            for (k, f) in &r.fits {
                if *k != m {
                    continue;
                }
                match f {
                    Ok(fit) => ok.push(fit.clone()),
                    Err(msg) => {
                        log::warn!("replication {} ({m}) failed: {msg}", r.replication);
                        failures += 1;
                    }
                }
            }
        }
        let metrics = if ok.is_empty() { None } else { Some(compute_metrics(&ok, cfg)?) };
        reports.push(MethodReport { method: m, metrics, failures });
    }
    let mean_censoring = replications.iter().map(|r| r.censoring_rate).sum::<f64>() / replications.len() as f64;
    Ok(StudyReport {
        config: cfg.clone(),
        methods: reports,
        replications,
        mean_censoring,
    })
}
