//! End-to-end and per-stage benchmarks on a simulated 100-firm panel.

use criterion::{criterion_group, criterion_main, Criterion};

use prodfn::functionals::compute_functionals;
use prodfn::gmm::{fit_gmm, GmmOptions};
use prodfn::panel::estimation_sample;
use prodfn::share::{fit_share_regression, ShareOptions};
use prodfn::simulate::{simulate, DgpSpec};
use prodfn::{build_dispersion_table, fit_gev};

fn benches(c: &mut Criterion) {
    let spec = DgpSpec::baseline(100, 8, 7);
    let (panel, _) = simulate(&spec).unwrap();
    let sample = estimation_sample(&panel).unwrap();
    let share = fit_share_regression(&sample, &ShareOptions::default()).unwrap();
    let fit = fit_gmm(&sample, &share, &GmmOptions::default()).unwrap();
    let functionals = compute_functionals(&panel, &sample, &fit).unwrap();
    let nu: Vec<f64> = functionals.records.iter().map(|r| r.nu).collect();

    let mut group = c.benchmark_group("pipeline_100x8");
    group.sample_size(20);
    group.bench_function("simulate", |b| b.iter(|| simulate(&spec).unwrap()));
    group.bench_function("share_regression", |b| {
        b.iter(|| fit_share_regression(&sample, &ShareOptions::default()).unwrap())
    });
    group.bench_function("gmm_stage", |b| {
        b.iter(|| fit_gmm(&sample, &share, &GmmOptions::default()).unwrap())
    });
    group.bench_function("functionals", |b| {
        b.iter(|| compute_functionals(&panel, &sample, &fit).unwrap())
    });
    group.bench_function("dispersion_table", |b| {
        b.iter(|| build_dispersion_table(&functionals).unwrap())
    });
    group.bench_function("gev_fit", |b| b.iter(|| fit_gev(&nu).unwrap()));
    group.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
