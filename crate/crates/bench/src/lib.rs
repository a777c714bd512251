//! Fixtures shared by the benchmarks.

use pfcure_core::data::{order_records, risk_sets, OrderedView, RiskSet};
use pfcure_core::simulate::gen_dataset;
use pfcure_core::{Censoring, RecurrentDataset, SimConfig};

/// One replication of the simulation design at `m` subjects.
pub fn study_dataset(m: usize, seed: u64) -> RecurrentDataset {
    let cfg = SimConfig::paper(m, 0.5, Censoring::Low25, seed);
    gen_dataset(&cfg, &mut cfg.replication_rng(0)).expect("valid design").0
}

pub fn ordered(data: &RecurrentDataset) -> (OrderedView, RiskSet) {
    let view = order_records(data);
    let risk = risk_sets(&view);
    (view, risk)
}
