//! Sequential vs row-parallel execution of the compensation engines.
//! Build with `--no-default-features` to measure the fallback alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use foem_core::calib::{generate_synthetic, SyntheticSpec};
use foem_core::{run_engine, DenseMatrix, EngineConfig, EngineKind, Exec, HessianState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn layer(d: usize) -> (DenseMatrix, HessianState) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = DenseMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let x = generate_synthetic(&SyntheticSpec {
        d_in: d,
        n_tokens: 2 * d,
        rho: 0.9,
        seed: 2,
    })
    .unwrap();
    let mut h = HessianState::new(d);
    h.accumulate(&x).unwrap();
    (w, h)
}

fn engines(c: &mut Criterion) {
    let mut group = c.benchmark_group("engines");
    group.sample_size(10);
    for d in [256, 512] {
        let (w, h) = layer(d);
        for kind in [EngineKind::Gptq, EngineKind::Foem] {
            for exec in [Exec::Sequential, Exec::Parallel] {
                let cfg = EngineConfig {
                    exec,
                    ..EngineConfig::with_engine(kind)
                };
                let id = BenchmarkId::new(format!("{kind}/{exec:?}"), d);
                group.bench_with_input(id, &cfg, |b, cfg| b.iter(|| run_engine("bench", &w, &h, cfg).unwrap()));
            }
        }
    }
    group.finish();
}

criterion_group!(benches, engines);
criterion_main!(benches);
