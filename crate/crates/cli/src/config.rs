//! Resolution of config file and flags into typed settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pfcure_core::data::parse_key_values;
use pfcure_core::report::Provenance;
use pfcure_core::simulate::Method;
use pfcure_core::{Censoring, CovStructure, FitOptions, GridRequest, KappaGrid, PenaltyKind, Schema, SimConfig, VarianceMethod};

use crate::CliError;

const SCHEMA_KEYS: [&str; 3] = ["incidence_covariates", "latency_covariates", "standardize"];

/// Config-file only: EM iteration cap.
const MAX_EM_ITER: &str = "max_em_iter";

const FIT_KEYS: [&str; 11] = [
    "data", "penalty", "frailty", "variance", "grid_size", "kappa1", "kappa2", "threads", "out", "verbose", MAX_EM_ITER,
];

const SIMULATE_KEYS: [&str; 16] = [
    "m",
    "theta",
    "rho",
    "censoring",
    "replications",
    "seed",
    "penalty",
    "frailty",
    "variance",
    "grid_size",
    "kappa1",
    "kappa2",
    "threads",
    "out",
    "verbose",
    MAX_EM_ITER,
];

/// Merged settings: file values first, flags on top.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>, allowed: &[&str]) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
            for (k, v) in parse_key_values(&text)? {
                if !allowed.contains(&k.as_str()) && !SCHEMA_KEYS.contains(&k.as_str()) {
                    return Err(CliError::config(&k, "unknown key in config file"));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::config(key, format!("cannot parse `{v}`: {e}"))))
            .transpose()
    }

    fn require<T: FromStr>(&self, key: &str, flag: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| CliError::config(key, format!("missing; pass {flag} or set `{key}` in the config file")))
    }

    fn schema(&self) -> Result<Option<Schema>, CliError> {
        if SCHEMA_KEYS.iter().all(|k| self.get(k).is_none()) {
            return Ok(None);
        }
        let pairs: Vec<(String, String)> = SCHEMA_KEYS
            .iter()
            .filter_map(|k| self.get(k).map(|v| (k.to_string(), v.to_string())))
            .collect();
        Ok(Some(Schema::from_pairs(&pairs)?))
    }

    fn grid(&self) -> Result<GridRequest, CliError> {
        let k1: Option<f64> = self.parse("kappa1")?;
        let k2: Option<f64> = self.parse("kappa2")?;
        match (k1, k2) {
            (Some(a), Some(b)) => {
                if self.get("grid_size").is_some() {
                    return Err(CliError::config("grid_size", "cannot be combined with a fixed kappa1/kappa2"));
                }
                let grid = KappaGrid::single(a, b);
                grid.validate()?;
                Ok(GridRequest::Explicit(grid))
            }
            (None, None) => Ok(match self.parse::<usize>("grid_size")? {
                Some(0) => return Err(CliError::config("grid_size", "need at least one point")),
                Some(points) => GridRequest::Auto { points },
                None => GridRequest::default(),
            }),
            (Some(_), None) => Err(CliError::config("kappa2", "required together with kappa1")),
            (None, Some(_)) => Err(CliError::config("kappa1", "required together with kappa2")),
        }
    }

    fn threads(&self) -> Result<Option<usize>, CliError> {
        match self.parse::<usize>("threads")? {
            Some(0) => Err(CliError::config("threads", "need at least one thread")),
            t => Ok(t),
        }
    }

    fn verbose(&self) -> Result<u8, CliError> {
        Ok(self.parse("verbose")?.unwrap_or(0))
    }
}

/// Settings shared by both commands.
#[derive(Debug, Clone)]
pub struct Common {
    pub frailty: CovStructure,
    pub variance: VarianceMethod,
    pub grid: GridRequest,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub verbose: u8,
    pub fit: FitOptions,
}

impl Common {
    fn from_settings(s: &Settings) -> Result<Self, CliError> {
        let variance = s.parse("variance")?.unwrap_or(VarianceMethod::Reml);
        let mut fit = FitOptions {
            variance_method: variance,
            ..FitOptions::default()
        };
        if let Some(n) = s.parse(MAX_EM_ITER)? {
            fit.max_em_iter = n;
        }
        fit.validate()?;
        Ok(Self {
            frailty: s.parse("frailty")?.unwrap_or(CovStructure::Constant),
            variance,
            grid: s.grid()?,
            threads: s.threads()?,
            out: s.require("out", "--out")?,
            verbose: s.verbose()?,
            fit,
        })
    }

    fn provenance(&self, p: &mut Provenance) {
        p.push("frailty", self.frailty);
        p.push("variance", self.variance);
        match &self.grid {
            GridRequest::Auto { points } => p.push("grid_size", points),
            GridRequest::Explicit(g) => {
                p.push("kappa1", format_list(&g.kappa1_values));
                p.push("kappa2", format_list(&g.kappa2_values));
            }
        }
        p.push(MAX_EM_ITER, self.fit.max_em_iter);
        p.push("threads", self.threads.map_or("all".to_string(), |t| t.to_string()));
        p.push("out", self.out.display());
    }
}

fn format_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn base_provenance(command: &str) -> Provenance {
    let mut p = Provenance::default();
    p.push("program", concat!("pfcure ", env!("CARGO_PKG_VERSION")));
    p.push("command", command);
    p
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub data: PathBuf,
    /// `None` puts every non-record column in both submodels.
    pub schema: Option<Schema>,
    pub penalty: PenaltyKind,
    pub common: Common,
}

impl FitConfig {
    pub fn resolve(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> Result<Self, CliError> {
        let s = Settings::resolve(config, flags, &FIT_KEYS)?;
        Ok(Self {
            data: s.require("data", "--data")?,
            schema: s.schema()?,
            penalty: s.parse("penalty")?.unwrap_or(PenaltyKind::Scad),
            common: Common::from_settings(&s)?,
        })
    }

    /// Full resolved configuration, schema included.
    pub fn provenance(&self, schema: &Schema) -> Provenance {
        let mut p = base_provenance("fit");
        p.push("data", self.data.display());
        p.push("incidence_covariates", schema.incidence_covariates.join(";"));
        p.push("latency_covariates", schema.latency_covariates.join(";"));
        p.push("standardize", schema.standardize);
        p.push("penalty", self.penalty);
        self.common.provenance(&mut p);
        p
    }
}

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub censoring: Censoring,
    pub methods: Vec<Method>,
    pub common: Common,
}

fn methods_for(penalty: Option<PenaltyKind>, variance: VarianceMethod) -> Vec<Method> {
    let pick = |kind| match (kind, variance) {
        (PenaltyKind::AdaptiveLasso, VarianceMethod::Reml) => Method::AdaptiveLasso,
        (PenaltyKind::AdaptiveLasso, VarianceMethod::Ml) => Method::AdaptiveLassoMl,
        (_, VarianceMethod::Reml) => Method::Scad,
        (_, VarianceMethod::Ml) => Method::ScadMl,
    };
    let mut methods = vec![Method::Oracle];
    match penalty {
        None => methods.extend([pick(PenaltyKind::AdaptiveLasso), pick(PenaltyKind::Scad)]),
        Some(PenaltyKind::None) => {}
        Some(kind) => methods.push(pick(kind)),
    }
    methods
}

impl SimulateConfig {
    pub fn resolve(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> Result<Self, CliError> {
        let s = Settings::resolve(config, flags, &SIMULATE_KEYS)?;
        let common = Common::from_settings(&s)?;
        let seed: u64 = s.require("seed", "--seed")?;
        let censoring = Censoring::from_percent(s.parse("censoring")?.unwrap_or(25))?;
        let mut sim = SimConfig::paper(s.parse("m")?.unwrap_or(200), s.parse("theta")?.unwrap_or(0.5), censoring, seed);
        sim.structure = common.frailty;
        sim.replications = s.parse("replications")?.unwrap_or(100);
        match (common.frailty, s.parse::<f64>("rho")?) {
            (CovStructure::Ar1, rho) => sim.rho = rho.unwrap_or(0.5),
            (CovStructure::Constant, Some(_)) => {
                return Err(CliError::config("rho", "only meaningful with --frailty ar1"));
            }
            (CovStructure::Constant, None) => {}
        }
        sim.validate()?;
        let methods = methods_for(s.parse("penalty")?, common.variance);
        Ok(Self {
            sim,
            censoring,
            methods,
            common,
        })
    }

    pub fn provenance(&self) -> Provenance {
        let mut p = base_provenance("simulate");
        p.push("m", self.sim.m);
        p.push("theta", self.sim.theta);
        if self.sim.structure == CovStructure::Ar1 {
            p.push("rho", self.sim.rho);
        }
        p.push("censoring", self.censoring.percent());
        p.push("replications", self.sim.replications);
        p.push("seed", self.sim.seed);
        p.push(
            "methods",
            self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(";"),
        );
        self.common.provenance(&mut p);
        p
    }
}
