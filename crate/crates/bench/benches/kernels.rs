use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pfcure_bench::{ordered, study_dataset};
use pfcure_core::em::{baseline_breslow_etail, fit_unpenalized, newton_mstep, posterior_weights};
use pfcure_core::likelihood::{blup_loglik, info_matrix, score};
use pfcure_core::{select_from_fit, CovStructure, FitOptions, GridRequest, PenaltyKind};

fn likelihood_kernels(c: &mut Criterion) {
    let data = study_dataset(600, 1);
    let (view, risk) = ordered(&data);
    let fit = fit_unpenalized(&data, CovStructure::Constant, &FitOptions::default()).unwrap();
    let params = fit.state.params.clone();
    let g = fit.state.g.clone();
    let opts = FitOptions::default();

    let mut group = c.benchmark_group("m600");
    group.sample_size(20);
    group.bench_function("loglik", |b| b.iter(|| blup_loglik(black_box(&params), &view, &g, &risk).unwrap()));
    group.bench_function("score", |b| b.iter(|| score(black_box(&params), &view, &g, &risk).unwrap()));
    group.bench_function("information", |b| b.iter(|| info_matrix(black_box(&params), &view, &g, &risk).unwrap()));
    group.bench_function("baseline", |b| {
        b.iter(|| baseline_breslow_etail(black_box(&params), &g, &view, &risk).unwrap())
    });
    group.bench_function("e_step", |b| {
        b.iter(|| posterior_weights(black_box(&params), &fit.state.baseline, &view).unwrap())
    });
    group.bench_function("newton_mstep", |b| {
        b.iter_batched(
            || params.clone(),
            |mut p| newton_mstep(&mut p, &g, &view, &risk, &opts).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn selection(c: &mut Criterion) {
    let data = study_dataset(600, 2);
    let fit = fit_unpenalized(&data, CovStructure::Constant, &FitOptions::default()).unwrap();
    let mut group = c.benchmark_group("selection_m600");
    group.sample_size(10);
    for kind in [PenaltyKind::AdaptiveLasso, PenaltyKind::Scad] {
        group.bench_function(format!("grid25_{kind}"), |b| {
            b.iter(|| select_from_fit(black_box(&fit), kind, data.n(), &GridRequest::default()).unwrap())
        });
    }
    group.finish();
}

fn full_fit(c: &mut Criterion) {
    let data = study_dataset(200, 3);
    let mut group = c.benchmark_group("fit_m200");
    group.sample_size(10);
    group.bench_function("reml_em", |b| {
        b.iter(|| fit_unpenalized(black_box(&data), CovStructure::Constant, &FitOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, likelihood_kernels, selection, full_fit);
criterion_main!(benches);
