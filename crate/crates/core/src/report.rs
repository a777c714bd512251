//! CSV report files with `#` provenance header lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::simulate::StudyReport;

/// Ordered `key=value` lines written at the top of every artifact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance(pub Vec<(String, String)>);

impl Provenance {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (k, v) in &self.0 {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes provenance lines, then a CSV header and rows.
pub fn write_csv_with_provenance(path: &Path, provenance: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    provenance.write_to(&mut out).map_err(io_err(path))?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(())
}

pub const TABLE1_HEADER: [&str; 6] = ["config", "method", "submodel", "correct", "incorrect", "mse"];
pub const TABLE2_HEADER: [&str; 7] = ["config", "method", "coefficient", "mean", "ase", "ese", "mean_theta"];
pub const BIAS_HEADER: [&str; 7] = ["config", "method", "replication", "coefficient", "truth", "estimate", "deviation"];

/// Shortest representation that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v}")
}

fn study_provenance(base: &Provenance, reports: &[StudyReport]) -> Provenance {
    let mut p = base.clone();
    for r in reports {
        let label = r.label();
        p.push(format!("{label}.mean_censoring"), num(r.mean_censoring));
        for m in &r.methods {
            p.push(format!("{label}.{}.failures", m.method), m.failures);
        }
    }
    p
}

pub fn table1_rows(reports: &[StudyReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        for m in &r.methods {
            let Some(metrics) = &m.metrics else { continue };
            for (name, s) in [("incidence", &metrics.incidence), ("latency", &metrics.latency)] {
                rows.push(vec![r.label(), m.method.to_string(), name.into(), num(s.correct), num(s.incorrect), num(s.mse)]);
            }
        }
    }
    rows
}

pub fn table2_rows(reports: &[StudyReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        for m in &r.methods {
            let Some(metrics) = &m.metrics else { continue };
            for c in &metrics.coefficients {
                rows.push(vec![
                    r.label(),
                    m.method.to_string(),
                    c.name.clone(),
                    num(c.mean),
                    num(c.ase),
                    num(c.ese),
                    num(metrics.mean_theta),
                ]);
            }
        }
    }
    rows
}

/// Every coefficient of every successful fit against its true value.
pub fn bias_rows(reports: &[StudyReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in reports {
        let cfg = &r.config;
        for rep in &r.replications {
            for (method, fit) in &rep.fits {
                let Ok(fit) = fit else { continue };
                let coefs = fit
                    .alpha
                    .iter()
                    .zip(cfg.alpha_true.iter())
                    .enumerate()
                    .map(|(j, (e, t))| (format!("alpha{j}"), *e, *t))
                    .chain(fit.beta.iter().zip(cfg.beta_true.iter()).enumerate().map(|(j, (e, t))| (format!("beta{}", j + 1), *e, *t)));
                for (name, est, truth) in coefs {
                    rows.push(vec![
                        r.label(),
                        method.to_string(),
                        rep.replication.to_string(),
                        name,
                        num(truth),
                        num(est),
                        num(est - truth),
                    ]);
                }
            }
        }
    }
    rows
}

/// Writes `table1.csv`, `table2.csv` and `bias.csv` into `dir`.
pub fn write_study_reports(dir: &Path, provenance: &Provenance, reports: &[StudyReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = study_provenance(provenance, reports);
    write_csv_with_provenance(&dir.join("table1.csv"), &p, &TABLE1_HEADER, &table1_rows(reports))?;
    write_csv_with_provenance(&dir.join("table2.csv"), &p, &TABLE2_HEADER, &table2_rows(reports))?;
    write_csv_with_provenance(&dir.join("bias.csv"), &p, &BIAS_HEADER, &bias_rows(reports))?;
    Ok(())
}
