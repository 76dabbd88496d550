use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use dbn_bench::{bundle, inputs, predictor};
use dbn_core::inference::{InferMode, InferOptions};
use dbn_core::logit::ens_logit;

const ROWS: usize = 256;

fn ensembles(c: &mut Criterion) {
    let b = bundle(5);
    let x = inputs(ROWS, 0);
    let mut g = c.benchmark_group("deep_ensemble");
    for k in [1, 3, 5] {
        let idx: Vec<usize> = (0..k).collect();
        g.bench_with_input(BenchmarkId::from_parameter(k), &idx, |bch, idx| {
            bch.iter(|| b.ensemble_probs(black_box(idx), black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn bridges(c: &mut Criterion) {
    let b = bundle(5);
    let x = inputs(ROWS, 0);
    let mut g = c.benchmark_group("dbn");
    for (bridges, steps) in [(1, 1), (2, 1), (1, 5)] {
        let p = predictor(&b, bridges, steps);
        let mode = if steps == 1 { InferMode::OneStep } else { InferMode::Ancestral(steps) };
        g.bench_function(format!("{bridges}x{steps}"), |bch| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            bch.iter(|| p.predict(black_box(&x), mode, InferOptions::deterministic(), &mut rng).unwrap())
        });
    }
    g.finish();
}

fn enslogit(c: &mut Criterion) {
    let probs: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 + 0.1 * i as f64, 0.9 - 0.1 * i as f64]).collect();
    c.bench_function("ens_logit/5x2", |bch| bch.iter(|| ens_logit::<f64, _>(black_box(&probs))));
}

criterion_group!(benches, ensembles, bridges, enslogit);
criterion_main!(benches);
