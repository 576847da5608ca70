//! Hot kernels on a single-thread pool against the full pool. Build with
//! `--no-default-features` to time the sequential fallback instead.

use std::f64::consts::PI;
use std::hint::black_box;

use brinkhom::evolution::{divergence_free, Evolver, FlowState};
use brinkhom::field::{CellField, FaceField};
use brinkhom::geometry::{enumerate_holes, rasterize, DomainSpec, HoleShape};
use brinkhom::mac::{MacParams, MacSystem};
use brinkhom::par;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

fn pools() -> Vec<(usize, ThreadPool)> {
    let all = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    [1, all].into_iter().map(|n| (n, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())).collect()
}

fn swirl(x: [f64; 3]) -> [f64; 3] {
    let s = |t: f64| (PI * t).sin();
    let c = |t: f64| (PI * t).cos();
    [2.0 * s(x[0]).powi(2) * s(x[1]) * c(x[1]) * s(x[2]), -2.0 * s(x[0]) * c(x[0]) * s(x[1]).powi(2) * s(x[2]), 0.0]
}

fn perforated_system(n: usize) -> MacSystem {
    let lat = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.5, HoleShape::Ball { radius: 0.5 }).unwrap();
    let mask = rasterize(&lat, n).unwrap();
    let solid = (0..mask.grid().cell_count()).map(|c| mask.is_solid(c)).collect();
    MacSystem::new(MacParams::new(mask.grid(), solid, 1.0)).unwrap()
}

fn kernels(c: &mut Criterion) {
    let pools = pools();
    let sys = perforated_system(48);
    let nv = sys.velocity_len();
    let x: Vec<f64> = (0..nv).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
    let mut y = vec![0.0; nv];

    let mut g = c.benchmark_group("velocity_apply_48");
    for (n, pool) in &pools {
        g.bench_with_input(BenchmarkId::from_parameter(n), n, |b, _| {
            pool.install(|| b.iter(|| sys.apply_velocity_packed(black_box(&x), &mut y)))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("dot_48");
    for (n, pool) in &pools {
        g.bench_with_input(BenchmarkId::from_parameter(n), n, |b, _| {
            pool.install(|| b.iter(|| par::dot(black_box(&x), black_box(&x))))
        });
    }
    g.finish();

    let mgs = sys.multigrids();
    let mg = &mgs[0];
    let rhs: Vec<f64> = (0..mg.op().len()).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
    let mut g = c.benchmark_group("vcycle_48");
    for (n, pool) in &pools {
        g.bench_with_input(BenchmarkId::from_parameter(n), n, |b, _| {
            pool.install(|| {
                b.iter(|| {
                    let mut z = vec![0.0; rhs.len()];
                    mg.vcycle(black_box(&rhs), &mut z);
                    z
                })
            })
        });
    }
    g.finish();

    let lat = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.5, HoleShape::Ball { radius: 0.5 }).unwrap();
    let mask = rasterize(&lat, 24).unwrap();
    let grid = mask.grid();
    let mut rho = CellField::from_fn(&grid, |x| if x[2] > 0.5 { 3.0 } else { 1.0 });
    for (c, r) in rho.values.iter_mut().enumerate() {
        if mask.is_solid(c) {
            *r = 2.0;
        }
    }
    let state = FlowState { rho, u: divergence_free(&mask, swirl, 1e-12).unwrap(), t: 0.0 };
    let f = FaceField::from_fn(&grid, |x| swirl(x).map(|v| 10.0 * v));
    let mut g = c.benchmark_group("evolution_step_24");
    g.sample_size(10);
    for (n, pool) in &pools {
        g.bench_with_input(BenchmarkId::from_parameter(n), n, |b, _| {
            pool.install(|| {
                let mut ev = Evolver::new(&mask, 0.05, None, 1e-9).unwrap();
                b.iter(|| ev.step(black_box(&state), &f, 0.002, false).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
