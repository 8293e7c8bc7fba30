use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use uot_bench::{coefficients, system, MeasurementFixture};
use uot_core::fem::assemble_system;
use uot_core::optics::diffusion_coefficient;
use uot_core::{solve_cg, SolverSettings};

fn bench_assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assemble");
    for n in [65, 129] {
        let coeffs = coefficients(n).unwrap();
        let d = diffusion_coefficient(&coeffs);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| assemble_system(coeffs.grid(), &d, &coeffs.mu, coeffs.gamma).unwrap())
        });
    }
    group.finish();
}

fn bench_cg(c: &mut Criterion) {
    let mut group = c.benchmark_group("cg_solve");
    group.sample_size(20);
    for n in [65, 129] {
        let (a, b) = system(n).unwrap();
        let settings = SolverSettings::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| solve_cg(&a, black_box(&b), settings.tol, settings.max_iter_for(a.dim())).unwrap())
        });
    }
    group.finish();
}

fn bench_measurement(c: &mut Criterion) {
    let mut group = c.benchmark_group("adjoint_measurement");
    group.sample_size(10);
    let fixture = MeasurementFixture::new(97, 40).unwrap();
    group.bench_function("97x97_scan40", |bch| bch.iter(|| fixture.measure().unwrap()));
    group.finish();
}

criterion_group!(benches, bench_assembly, bench_cg, bench_measurement);
criterion_main!(benches);
