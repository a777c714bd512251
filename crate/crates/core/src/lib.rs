//! Penalized frailty mixture cure models for recurrent gap-time data.

pub mod data;
pub mod em;
pub mod error;
pub mod frailty;
pub mod likelihood;
pub mod linalg;
pub mod penalty;
pub mod report;
pub mod selection;
pub mod simulate;

pub use data::{load_dataset, order_records, risk_sets, OrderedView, RecordRow, RecurrentDataset, RiskSet, Schema};
pub use error::{Error, Result};
pub use likelihood::{Blocks, CovStructure, InfoMatrix, LatencyWorkspace, LinearPredictors, ModelParams};
pub use em::{fit_unpenalized, fit_unpenalized_ml, BaselineSurvival, EMState, FitOptions, UnpenalizedFit, VarianceMethod};
pub use penalty::{PenaltyKind, PenaltySpec, Submodel};
pub use selection::{fit_penalized, select_from_fit, BicPoint, FitResult, GridRequest, KappaGrid, SelectionResult};
pub use simulate::{run_study, Censoring, Method, SimConfig, StudyMetrics, StudyOptions, StudyReport};
