use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossfire_bench::{batch, model};
use crossfire_core::attack::{pbfa, AttackBudget, CandidatePolicy};

// One search round scores every candidate by apply, measure, revert.
fn pbfa_round(c: &mut Criterion) {
    let mut g = c.benchmark_group("pbfa_round");
    g.sample_size(10);
    let data = batch(1, 32);
    let labels = data.labels().unwrap().clone();
    for hidden in [8, 16, 32] {
        let m = model(0, hidden, 2);
        let budget = AttackBudget::new(1, CandidatePolicy::default()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(hidden), &m, |b, m| {
            b.iter(|| {
                let mut m = m.clone();
                pbfa(black_box(&mut m), &data, &labels, budget).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, pbfa_round);
criterion_main!(benches);
