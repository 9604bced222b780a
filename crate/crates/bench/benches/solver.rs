use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use certignc::certifier::{certify, riemannian_staircase, LanczosConfig, StaircaseConfig};
use certignc::gnc::{GncConfig, InnerMode};
use certignc::{gnc_solve, lift_graph, point_from_estimate, LocalSolver, SolverConfig};
use certignc_bench::{grid, ring};

fn data_matrix(c: &mut Criterion) {
    let problem = grid(3, 500, 0.0, 1);
    let g = lift_graph(&problem, 5).unwrap();
    c.bench_function("assemble_q/grid3d_500", |b| b.iter(|| black_box(g.data_matrix())));
}

fn local_and_certify(c: &mut Criterion) {
    let problem = grid(2, 400, 0.0, 2);
    let g = lift_graph(&problem, 2).unwrap();
    let y0 = point_from_estimate(g.layout.clone(), &problem.odometry_estimate(), 2).unwrap();
    let solver = LocalSolver::new(g.data_matrix(), SolverConfig::default()).unwrap();
    let mut group = c.benchmark_group("grid2d_400");
    group.sample_size(10);
    group.bench_function("local_solve", |b| b.iter(|| black_box(solver.solve(&y0).unwrap())));

    let q = g.data_matrix();
    let y = solver.solve(&y0).unwrap().point;
    group.bench_function("certify", |b| b.iter(|| black_box(certify(&q, &y, 1e-6, &LanczosConfig::default()))));
    group.bench_function("staircase", |b| {
        b.iter(|| black_box(riemannian_staircase(&g, &y0, &StaircaseConfig::default()).unwrap()))
    });
    group.finish();
}

fn gnc(c: &mut Criterion) {
    let problem = ring(40, 0.2, 3);
    let stair = StaircaseConfig::default();
    let mut group = c.benchmark_group("gnc/ring40_20pct");
    group.sample_size(10);
    for (name, inner_mode) in [("certifiable", InnerMode::Certifiable), ("local", InnerMode::Local)] {
        let cfg = GncConfig { inner_mode, ..GncConfig::default() };
        group.bench_function(name, |b| b.iter(|| black_box(gnc_solve(&problem, &cfg, &stair, 0).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, data_matrix, local_and_certify, gnc);
criterion_main!(benches);
