#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pfcure_core::data::{order_records, risk_sets, OrderedView, RecordRow, RecurrentDataset, RiskSet};
use pfcure_core::likelihood::{CovStructure, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub data: RecurrentDataset,
    pub view: OrderedView,
    pub risk: RiskSet,
    pub g: Vec<f64>,
    pub params: ModelParams,
}

/// Small random dataset with ties, censoring and partial cure weights.
pub fn random_instance(seed: u64, structure: CovStructure, max_records: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(3..=5);
    let d = 2;
    let p = 2;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for i in 0..m {
        let id = 10 + i as i64;
        ids.push(id);
        let ni = rng.random_range(1..=4);
        for j in 0..ni {
            if rows.len() >= max_records {
                break;
            }
            // quantized times produce ties
            let t = (rng.random_range(1..12) as f64) * 0.5;
            rows.push(RecordRow {
                subject_id: id,
                event_index: j as u32 + 1,
                gap_time: t,
                status: rng.random_bool(0.6),
            });
        }
    }
    let used: Vec<i64> = ids.iter().copied().filter(|id| rows.iter().any(|r| r.subject_id == *id)).collect();
    let mm = used.len();
    let x = DMatrix::from_fn(mm, d, |_, _| rng.random_range(-1.0..1.0));
    let z = DMatrix::from_fn(mm, p, |_, _| rng.random_range(-1.0..1.0));
    if !rows.iter().any(|r| r.status) {
        rows[0].status = true;
    }
    let data = RecurrentDataset::new(
        rows,
        used,
        x,
        z,
        vec!["x1".into(), "x2".into()],
        vec!["z1".into(), "z2".into()],
    )
    .unwrap();
    let view = order_records(&data);
    let risk = risk_sets(&view);
    let g: Vec<f64> = view
        .status
        .iter()
        .map(|&s| if s { 1.0 } else { rng.random_range(0.05..0.95) })
        .collect();
    let mut params = ModelParams::zeros(&view, structure, rng.random_range(0.3..1.5), 0.0);
    if structure == CovStructure::Ar1 {
        params.rho = rng.random_range(-0.7..0.7);
    }
    for v in params.alpha.iter_mut().chain(params.beta.iter_mut()).chain(params.u.iter_mut()) {
        *v = rng.random_range(-0.8..0.8);
    }
    Instance { data, view, risk, g, params }
}

pub fn perturb(params: &ModelParams, k: usize, h: f64) -> ModelParams {
    let mut p = params.clone();
    let mut w = p.omega();
    w[k] += h;
    p.set_omega(&w);
    p
}

pub fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(1.0);
    (a - b).amax() / scale
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}
