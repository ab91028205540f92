use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use sidelab::diffusion::{sample_unguided, GuidanceSpec, NoiseSchedule, ScheduleKind, ScoreModel};
use sidelab::metrics::{best_matches, simulate_counts, Scorer};
use sidelab::nn::{Activation, MlpConfig, MlpParams, Tensor};
use sidelab::{rng, Exec};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matching(c: &mut Criterion) {
    let mut r = rng::seeded(1);
    let train = Tensor::new(vec![256, 64], rng::normal_vec(&mut r, 256 * 64)).unwrap();
    let generated = Tensor::new(vec![1024, 64], rng::normal_vec(&mut r, 1024 * 64)).unwrap();
    let scorer = Scorer::default();
    let mut g = c.benchmark_group("best_matches_1024x256");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| best_matches(&generated, &train, &scorer, exec).unwrap())
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mut r = rng::seeded(2);
    let cfg = MlpConfig {
        input_dim: 16,
        hidden_dim: 64,
        output_dim: 16,
        blocks: 2,
        activation: Activation::Silu,
        time_embed_dim: 16,
        time_input: true,
        time_modules: true,
    };
    let model = ScoreModel::new(MlpParams::init(cfg, &mut r).unwrap()).unwrap();
    let sched = NoiseSchedule::new(100, ScheduleKind::Linear, (1e-4, 0.02)).unwrap();
    let spec = GuidanceSpec::unguided(20);
    let mut g = c.benchmark_group("sample_256_chains");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_unguided(&model, &sched, &spec, 256, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut r = rng::seeded(3);
    let p: Vec<f64> = (0..64).map(|_| r.random_range(0.0..0.01)).collect();
    let mut g = c.benchmark_group("simulate_counts_20k");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_counts(&p, 512, 20_000, 4, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matching, sampling, monte_carlo);
criterion_main!(benches);
