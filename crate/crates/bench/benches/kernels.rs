//! Hot-path benchmarks: flow evaluation (both directions and the tape-free
//! sampling path), the reference-size MLP, one stretch-move sweep, and
//! posterior sampling throughput.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use invflow_core::bayes::{InnPosterior, PriorBox};
use invflow_core::flow::{build_flow, flow_forward, flow_inverse, flow_map, FlowScratch};
use invflow_core::mcmc::{stretch_move, Ensemble, LogDensity};
use invflow_core::nnet::{init_mlp, mlp_backward, mlp_forward, InitScheme};

fn reference_flow(width: usize, depth: usize, blocks: usize) -> invflow_core::FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = build_flow(7, blocks, width, depth, 2.0, &mut rng).unwrap();
    m.randomize_subnets(0.3, &mut rng);
    m
}

fn bench_flow(c: &mut Criterion) {
    let big = reference_flow(256, 2, 10);
    let small = reference_flow(64, 1, 6);
    let xi = vec![0.3, -0.7, 0.2, 1.1, -0.4, 0.9, 0.05];

    c.bench_function("flow_forward_L10_w256", |b| {
        b.iter(|| flow_forward(&big, black_box(&xi)).unwrap())
    });
    c.bench_function("flow_inverse_L10_w256", |b| {
        let x = flow_forward(&big, &xi).unwrap().output;
        b.iter(|| flow_inverse(&big, black_box(&x)).unwrap())
    });
    c.bench_function("flow_map_L6_w64", |b| {
        let mut scratch = FlowScratch::default();
        let mut out = Vec::new();
        b.iter(|| {
            flow_map(&small, black_box(&xi), &mut scratch, &mut out).unwrap();
            black_box(&out);
        })
    });
}

fn bench_mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = init_mlp(&[7, 256, 178], InitScheme::HeUniform, &mut rng).unwrap();
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..178).map(|_| rng.random_range(-1.0..1.0)).collect();

    c.bench_function("mlp_forward_7_256_178", |b| {
        b.iter(|| mlp_forward(&net, black_box(&x)).unwrap())
    });
    c.bench_function("mlp_backward_7_256_178", |b| {
        let (_, tape) = mlp_forward(&net, &x).unwrap();
        b.iter(|| mlp_backward(&net, &tape, black_box(&upstream)).unwrap())
    });
}

struct StdNormal7;

impl LogDensity for StdNormal7 {
    fn dim(&self) -> usize {
        7
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
}

fn bench_mcmc(c: &mut Criterion) {
    c.bench_function("stretch_move_sweep_K32_d7", |b| {
        let target = StdNormal7;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ens =
            Ensemble::init_uniform(&target, 32, &[-1.0; 7], &[1.0; 7], &mut rng).unwrap();
        b.iter(|| stretch_move(&mut ens, &target, 2.0, &mut rng).unwrap())
    });
}

fn bench_sampling(c: &mut Criterion) {
    let flow = reference_flow(64, 1, 6);
    let prior = PriorBox::default_grating();
    let posterior = InnPosterior::new(flow, prior, None).unwrap();
    c.bench_function("posterior_sample_1000_draws", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            black_box(posterior.sample(1000, seed, "bench").unwrap())
        })
    });
}

criterion_group!(benches, bench_flow, bench_mlp, bench_mcmc, bench_sampling);
criterion_main!(benches);
