use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hicox::admm::fit;
use hicox::simulate::{gen_collection, SimScenario};
use hicox::{concordance, CoxStudy, FusionExponent, PenaltyConfig, SimilarityMatrix, SolverOptions};
use nalgebra::DVector;

fn scenario(k: usize, p: usize, n: (usize, usize)) -> SimScenario {
    SimScenario {
        k_total: k,
        k_fit: k,
        p,
        cluster_sizes: Some(vec![k]),
        n_range: n,
        holdout_per_study: 10,
        ..Default::default()
    }
}

fn likelihood(c: &mut Criterion) {
    let col = gen_collection(&scenario(1, 100, (500, 500)), 0).unwrap();
    let study = CoxStudy::new(&col.studies[0]).unwrap();
    let beta = DVector::from_element(100, 0.01);
    c.bench_function("log_lik_grad n=500 p=100", |b| b.iter(|| study.log_lik_grad(black_box(&beta))));
}

fn cstat(c: &mut Criterion) {
    let col = gen_collection(&scenario(1, 5, (1000, 1000)), 0).unwrap();
    let s = &col.studies[0];
    let scores = s.covariates().column(0).iter().copied().collect::<Vec<_>>();
    c.bench_function("concordance n=1000", |b| {
        b.iter(|| concordance(black_box(&scores), s.times(), s.status()).unwrap())
    });
}

fn admm(c: &mut Criterion) {
    let col = gen_collection(&scenario(3, 20, (100, 150)), 0).unwrap();
    let cfg = PenaltyConfig::new(0.0, 1.0, FusionExponent::Two, SimilarityMatrix::identity(3).scaled(0.05).unwrap()).unwrap();
    let opts = SolverOptions {
        adaptive_rho: true,
        ..Default::default()
    };
    let mut group = c.benchmark_group("admm");
    group.sample_size(10);
    group.bench_function("fit K=3 p=20 a=2", |b| b.iter(|| fit(black_box(&col.studies), &cfg, &opts).unwrap()));
    group.finish();
}

criterion_group!(benches, likelihood, cstat, admm);
criterion_main!(benches);
