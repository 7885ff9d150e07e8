use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sdelab_core::potential::{chains, reduced_function, DiscreteResolvent};
use sdelab_core::resolvent::grid::GridOperator;
use sdelab_core::{simulate_path, step, BoundedDrift, DriftSpec, GalerkinModel, Potential, SimConfig, TestFn};

fn setup() -> (GalerkinModel, DriftSpec) {
    let m = GalerkinModel::diagonal(vec![1.0, 4.0, 9.0], 0.0).unwrap();
    let d = DriftSpec::new(Potential::Abs { c: 1.0 }, BoundedDrift::BoundedSin { c: 0.3 }, None, 3).unwrap();
    (m, d)
}

fn engine(c: &mut Criterion) {
    let (m, d) = setup();
    let x = [0.4, -0.2, 0.1];
    let z = [0.3, -1.1, 0.7];
    c.bench_function("split_step_3d", |b| b.iter(|| step(&m, &d, black_box(&x), 1e-3, &z).unwrap()));
    let cfg = SimConfig::new(1e-3, 1.0, 1, 1).unwrap();
    c.bench_function("simulate_path_1000_steps", |b| {
        b.iter(|| simulate_path(&m, &d, black_box(&x), &cfg, 0).unwrap())
    });
}

fn grids(c: &mut Criterion) {
    let (m, d) = setup();
    let origin = vec![vec![0.0; 3]];
    let op1 = GridOperator::for_coords(&m, &d.potential, &[0], &origin, None).unwrap();
    let g1 = op1.sample(|x| TestFn::Cos(0).eval(x));
    c.bench_function("grid_resolvent_1d_4001", |b| b.iter(|| op1.resolvent(1.0, black_box(&g1)).unwrap()));
    let op2 = GridOperator::for_coords(&m, &d.potential, &[0, 1], &origin, Some(101)).unwrap();
    let g2 = op2.sample(|x| TestFn::CosDot(vec![1.0, 0.5, 0.0]).eval(x));
    c.bench_function("grid_resolvent_2d_101", |b| b.iter(|| op2.resolvent(1.0, black_box(&g2)).unwrap()));
}

fn potential(c: &mut Criterion) {
    let res = DiscreteResolvent::from_generator(chains::birth_death(50, 1.0, 1.5, 0.05), &[0.5], None).unwrap();
    let mut a = vec![false; 50];
    a[0] = true;
    a[49] = true;
    let u = res.apply(0.5, &vec![1.0; 50]).unwrap();
    c.bench_function("reduced_function_50_states", |b| {
        b.iter(|| reduced_function(&res, black_box(&a), &u, 0.5).unwrap())
    });
}

criterion_group!(benches, engine, grids, potential);
criterion_main!(benches);
