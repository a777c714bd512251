use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

const SIMULATE_EXAMPLE: &str = "\
Example, one row of the selection study (m = 200, theta = 0.5, 25% censoring, 100 replications, SCAD):

  pfcure simulate --m 200 --theta 0.5 --censoring 25 --replications 100 --penalty scad --seed 2024 --out results/m200";

const FIT_EXAMPLE: &str = "\
The data CSV needs the columns subject_id, event_index, gap_time and status (1 = event, 0 = censored).
Covariate columns are chosen with `incidence_covariates` and `latency_covariates` in the --config file;
without them every other column enters both submodels.

  pfcure fit --data records.csv --config model.txt --penalty scad --out fit/";

#[derive(Debug, Parser)]
#[command(name = "pfcure", version, about = "Penalized frailty mixture cure models for recurrent gap-time data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a dataset and write the coefficient table, tuning path and baseline.
    #[command(after_help = FIT_EXAMPLE)]
    Fit(FitArgs),
    /// Run a Monte Carlo study and write the summary tables.
    #[command(after_help = SIMULATE_EXAMPLE)]
    Simulate(SimulateArgs),
}

/// Options shared by both commands. Every flag has a config-file key with
/// the same name, dashes replaced by underscores.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frailty covariance: constant | ar1.
    #[arg(long)]
    pub frailty: Option<String>,
    /// Variance-component estimator: reml | ml.
    #[arg(long)]
    pub variance: Option<String>,
    /// Points per axis of the automatic tuning grid.
    #[arg(long)]
    pub grid_size: Option<String>,
    /// Fixed incidence tuning value; needs --kappa2 too.
    #[arg(long)]
    pub kappa1: Option<String>,
    /// Fixed latency tuning value; needs --kappa1 too.
    #[arg(long)]
    pub kappa2: Option<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Recurrent-event CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// none | alasso | scad.
    #[arg(long)]
    pub penalty: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Subjects per replication.
    #[arg(long)]
    pub m: Option<String>,
    /// True frailty variance.
    #[arg(long)]
    pub theta: Option<String>,
    /// True AR(1) correlation; only with --frailty ar1.
    #[arg(long)]
    pub rho: Option<String>,
    /// Nominal censoring level: 25 | 40.
    #[arg(long)]
    pub censoring: Option<String>,
    #[arg(long)]
    pub replications: Option<String>,
    /// Required: fixes every replication's data.
    #[arg(long)]
    pub seed: Option<String>,
    /// alasso | scad; both when omitted. The oracle always runs.
    #[arg(long)]
    pub penalty: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn text(v: &Option<String>) -> Option<String> {
    v.clone()
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

impl CommonArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("frailty", text(&self.frailty)),
            ("variance", text(&self.variance)),
            ("grid_size", text(&self.grid_size)),
            ("kappa1", text(&self.kappa1)),
            ("kappa2", text(&self.kappa2)),
            ("threads", text(&self.threads)),
            ("out", path(&self.out)),
            ("verbose", (self.verbose > 0).then(|| self.verbose.to_string())),
        ]
    }
}

impl FitArgs {
    /// Flags given on the command line, as config keys.
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        let mut out = vec![("data", path(&self.data)), ("penalty", text(&self.penalty))];
        out.extend(self.common.pairs());
        out
    }
}

impl SimulateArgs {
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        let mut out = vec![
            ("m", text(&self.m)),
            ("theta", text(&self.theta)),
            ("rho", text(&self.rho)),
            ("censoring", text(&self.censoring)),
            ("replications", text(&self.replications)),
            ("seed", text(&self.seed)),
            ("penalty", text(&self.penalty)),
        ];
        out.extend(self.common.pairs());
        out
    }
}
