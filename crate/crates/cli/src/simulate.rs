//! The `simulate` command.

use log::{info, warn};
use pfcure_core::report::write_study_reports;
use pfcure_core::{run_study, StudyOptions, StudyReport};

use crate::config::SimulateConfig;
use crate::CliError;

pub fn simulate_command(cfg: &SimulateConfig) -> Result<StudyReport, CliError> {
    let opts = StudyOptions {
        fit: cfg.common.fit.clone(),
        grid: cfg.common.grid.clone(),
    };
    info!(
        "{} replications of m = {}, theta = {}, methods {:?}",
        cfg.sim.replications, cfg.sim.m, cfg.sim.theta, cfg.methods
    );
    let report = run_study(&cfg.sim, &cfg.methods, &opts)?;
    write_study_reports(&cfg.common.out, &cfg.provenance(), std::slice::from_ref(&report))?;
    info!("mean censoring rate {:.3}", report.mean_censoring);
    for m in &report.methods {
        if m.failures > 0 {
            warn!("{}: {} of {} replications failed", m.method, m.failures, cfg.sim.replications);
        }
    }
    if let Some(m) = report.methods.iter().find(|m| m.metrics.is_none()) {
        return Err(CliError::NotConverged {
            iterations: 0,
            detail: format!("every replication failed for {}", m.method),
            trace: cfg.common.out.join("table1.csv"),
        });
    }
    Ok(report)
}
