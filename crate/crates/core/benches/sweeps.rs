//! Sequential against data-parallel execution on the two sweeps that fan out:
//! the mountain-pass certification and a small dichotomy sweep.

use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pwlab_core::dynamics::{evolve, DampingKind, DampingProfile, Equation, EvolveOptions, State};
use pwlab_core::{
    certify_well_constants, petviashvili_solve, Domain, DomainSpec, Execution, PetviashviliOptions,
};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn certification(c: &mut Criterion) {
    let dom = Domain::new(DomainSpec::interval(PI, 128)).unwrap();
    let gs = petviashvili_solve(&dom, &PetviashviliOptions::default()).unwrap();
    let mut group = c.benchmark_group("certification_1000");
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let mut g = gs.clone();
                certify_well_constants(&dom, &mut g, 1000, 7, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn dichotomy(c: &mut Criterion) {
    let dom = Domain::new(DomainSpec::interval(PI, 64)).unwrap();
    let gs = petviashvili_solve(&dom, &PetviashviliOptions::default()).unwrap();
    let g = DampingProfile::new(&dom, DampingKind::Constant { level: 1.0 }).unwrap();
    let eq = Equation::default();
    let lambdas = [0.4, 0.6, 0.8, 0.95, 1.05, 1.2, 1.4, 1.6];
    let run = |&lambda: &f64| {
        let s = State::new(&dom, &g, &eq, gs.q.scaled(lambda), dom.zero_field()).unwrap();
        let opts = EvolveOptions {
            t_end: 5.0,
            blowup_scale: Some(s.h01().max(1.0)),
            ..Default::default()
        };
        evolve(&dom, &g, &eq, s, &opts).unwrap().steps
    };
    let mut group = c.benchmark_group("dichotomy_8_runs");
    group.sample_size(10);
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| exec.map(&lambdas, run))
        });
    }
    group.finish();
}

criterion_group!(benches, certification, dichotomy);
criterion_main!(benches);
