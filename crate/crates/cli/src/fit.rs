//! The `fit` command.

use std::path::Path;

use log::info;
use pfcure_core::report::{write_csv_with_provenance, Provenance};
use pfcure_core::{fit_penalized, load_dataset, CovStructure, FitResult, PenaltyKind, RecurrentDataset, Schema};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::FitConfig;
use crate::CliError;

pub const COEFFICIENT_HEADER: [&str; 6] = ["submodel", "variable", "estimate", "ase", "p_value", "zeroed"];
pub const TABLE_HEADER_UNPENALIZED: [&str; 3] = ["Variable", "Estimate (ASE)", "p-value"];
pub const TABLE_HEADER_PENALIZED: [&str; 2] = ["Variable", "Estimate (ASE)"];

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub submodel: &'static str,
    pub variable: String,
    pub estimate: f64,
    pub ase: f64,
    /// Wald p-value; unpenalized fits only.
    pub p_value: Option<f64>,
    pub zeroed: bool,
}

/// Everything the output files are built from.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub penalty: PenaltyKind,
    pub structure: CovStructure,
    pub coefficients: Vec<CoefficientRow>,
    pub theta: f64,
    pub rho: f64,
    pub fit: FitResult,
}

/// Two-sided normal-approximation p-value of `estimate / ase`.
pub fn wald_p_value(estimate: f64, ase: f64) -> f64 {
    if ase <= 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    let normal = Normal::standard();
    2.0 * normal.cdf(-(estimate / ase).abs())
}

pub fn summarize(data: &RecurrentDataset, fit: FitResult, penalty: PenaltyKind) -> FitSummary {
    let ase = fit.selection.ase.clone().expect("filled by select_from_fit");
    let alpha = fit.alpha_hat();
    let beta = fit.beta_hat();
    let na = alpha.len();
    let mut rows = Vec::with_capacity(na + beta.len());
    let mut push = |submodel, variable: String, estimate: f64, ase: f64, penalized: bool| {
        rows.push(CoefficientRow {
            submodel,
            variable,
            estimate,
            ase,
            p_value: (penalty == PenaltyKind::None).then(|| wald_p_value(estimate, ase)),
            zeroed: penalized && penalty != PenaltyKind::None && estimate == 0.0,
        });
    };
    push("incidence", "Intercept".into(), alpha[0], ase[0], false);
    for (j, name) in data.incidence_names().iter().enumerate() {
        push("incidence", name.clone(), alpha[j + 1], ase[j + 1], true);
    }
    for (j, name) in data.latency_names().iter().enumerate() {
        push("latency", name.clone(), beta[j], ase[na + j], true);
    }
    FitSummary {
        penalty,
        structure: fit.structure,
        coefficients: rows,
        theta: fit.theta(),
        rho: fit.rho(),
        fit,
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Three decimals; a value that rounds to zero prints as `0`.
fn three(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "0.000" || s == "-0.000" {
        "0".into()
    } else {
        s
    }
}

fn p_text(p: f64) -> String {
    if p < 0.0005 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

pub fn coefficient_rows(summary: &FitSummary) -> Vec<Vec<String>> {
    summary
        .coefficients
        .iter()
        .map(|c| {
            vec![
                c.submodel.to_string(),
                c.variable.clone(),
                num(c.estimate),
                num(c.ase),
                c.p_value.map(num).unwrap_or_default(),
                c.zeroed.to_string(),
            ]
        })
        .collect()
}

/// The publication layout: section rows, `estimate (ASE)` cells, a p-value
/// column only without a penalty, and the variance components last.
pub fn publication_table(summary: &FitSummary) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let unpenalized = summary.penalty == PenaltyKind::None;
    let header: Vec<&str> = if unpenalized {
        TABLE_HEADER_UNPENALIZED.to_vec()
    } else {
        TABLE_HEADER_PENALIZED.to_vec()
    };
    let width = header.len();
    let row = |cells: Vec<String>| {
        let mut cells = cells;
        cells.resize(width, String::new());
        cells
    };
    let mut rows = Vec::new();
    for (submodel, title) in [("incidence", "Incidence"), ("latency", "Latency")] {
        rows.push(row(vec![title.into()]));
        for c in summary.coefficients.iter().filter(|c| c.submodel == submodel) {
            let cell = if c.zeroed {
                "0 (0)".to_string()
            } else {
                format!("{} ({})", three(c.estimate), three(c.ase))
            };
            let mut cells = vec![c.variable.clone(), cell];
            if let Some(p) = c.p_value {
                cells.push(p_text(p));
            }
            rows.push(row(cells));
        }
    }
    rows.push(row(vec!["Variance component".into()]));
    // no p-value: the null value sits on the boundary
    rows.push(row(vec!["theta".into(), three(summary.theta)]));
    if summary.structure == CovStructure::Ar1 {
        rows.push(row(vec!["rho".into(), three(summary.rho)]));
    }
    (header, rows)
}

pub fn write_outputs(dir: &Path, provenance: &Provenance, summary: &FitSummary) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::config("out", format!("cannot create {}: {e}", dir.display())))?;
    write_csv_with_provenance(&dir.join("coefficients.csv"), provenance, &COEFFICIENT_HEADER, &coefficient_rows(summary))?;
    let (header, rows) = publication_table(summary);
    write_csv_with_provenance(&dir.join("table.csv"), provenance, &header, &rows)?;

    let fit = &summary.fit;
    let state = &fit.unpenalized.state;
    let (k1, k2) = fit.selection.kappa_star;
    let mut params = vec![vec!["theta".into(), num(summary.theta)]];
    if summary.structure == CovStructure::Ar1 {
        params.push(vec!["rho".into(), num(summary.rho)]);
    }
    params.extend([
        vec!["kappa1".into(), num(k1)],
        vec!["kappa2".into(), num(k2)],
        vec!["loglik".into(), num(state.loglik)],
        vec!["em_iterations".into(), state.iterations.to_string()],
        vec!["records".into(), fit.n.to_string()],
    ]);
    write_csv_with_provenance(&dir.join("parameters.csv"), provenance, &["parameter", "value"], &params)?;

    let path: Vec<Vec<String>> = fit
        .selection
        .bic_path
        .iter()
        .map(|b| vec![num(b.kappa1), num(b.kappa2), num(b.bic), b.nonzero.to_string()])
        .collect();
    write_csv_with_provenance(&dir.join("bic_path.csv"), provenance, &["kappa1", "kappa2", "bic", "nonzero"], &path)?;

    let base = &state.baseline;
    let surv: Vec<Vec<String>> = base
        .knots
        .iter()
        .zip(&base.values)
        .zip(&base.cumhaz)
        .map(|((t, s), h)| vec![num(*t), num(*s), num(*h)])
        .collect();
    write_csv_with_provenance(
        &dir.join("baseline_survival.csv"),
        provenance,
        &["time", "survival", "cumulative_hazard"],
        &surv,
    )?;
    write_trace(dir, provenance, &fit.unpenalized.state.trace)
}

fn write_trace(dir: &Path, provenance: &Provenance, trace: &[pfcure_core::em::IterationRecord]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                num(r.loglik),
                num(r.theta),
                num(r.rho),
                num(r.max_change),
                r.newton_steps.to_string(),
            ]
        })
        .collect();
    write_csv_with_provenance(
        &dir.join("em_trace.csv"),
        provenance,
        &["iteration", "loglik", "theta", "rho", "max_change", "newton_steps"],
        &rows,
    )?;
    Ok(())
}

pub fn fit_command(cfg: &FitConfig) -> Result<FitSummary, CliError> {
    let schema = match &cfg.schema {
        Some(s) => s.clone(),
        None => Schema::all_columns(&cfg.data)?,
    };
    let data = load_dataset(&cfg.data, &schema)?;
    info!(
        "loaded {} records from {} subjects ({} events)",
        data.n(),
        data.m(),
        data.n_events()
    );
    let provenance = cfg.provenance(&schema);
    let fit = fit_penalized(&data, cfg.common.frailty, cfg.penalty, &cfg.common.fit, &cfg.common.grid)?;
    let state = &fit.unpenalized.state;
    if !state.converged {
        std::fs::create_dir_all(&cfg.common.out)
            .map_err(|e| CliError::config("out", format!("cannot create {}: {e}", cfg.common.out.display())))?;
        write_trace(&cfg.common.out, &provenance, &state.trace)?;
        let last = state.trace.last();
        return Err(CliError::NotConverged {
            iterations: state.iterations,
            detail: last.map_or_else(String::new, |r| {
                format!("last loglik {}, max parameter change {:e}, theta {}", r.loglik, r.max_change, r.theta)
            }),
            trace: cfg.common.out.join("em_trace.csv"),
        });
    }
    info!("converged after {} EM iterations, theta = {}", state.iterations, fit.theta());
    let summary = summarize(&data, fit, cfg.penalty);
    write_outputs(&cfg.common.out, &provenance, &summary)?;
    Ok(summary)
}
