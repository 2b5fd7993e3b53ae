use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nextsession::eval::{ndcg_at_k, recall_at_k, top_k};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..n).map(|_| rng.random()).collect()
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_k");
    for n in [10_000usize, 100_000, 1_000_000] {
        let s = scores(n);
        for k in [10usize, 500] {
            group.bench_with_input(BenchmarkId::new(format!("k={k}"), n), &s, |b, s| b.iter(|| top_k(s, k)));
        }
    }
    group.finish();

    let s = scores(100_000);
    let ranked = top_k(&s, 500);
    let targets: Vec<u32> = (0..20).map(|i| i * 4_999).collect();
    c.bench_function("metrics@500", |b| {
        b.iter(|| {
            recall_at_k(&ranked, &targets, 500).unwrap() + ndcg_at_k(&ranked, &targets, 500).unwrap()
        })
    });
}

criterion_group!(benches, ranking);
criterion_main!(benches);
