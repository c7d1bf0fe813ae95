// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wall-clock cost of a greedy decode with and without context eviction.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icl_locus::efficiency::savings_formula;
use icl_locus::MaskVariant;
use icl_locus_bench::Fixture;

const NEW_TOKENS: usize = 8;

fn decode(c: &mut Criterion) {
    let f = Fixture::desk(5, true).expect("fixture");
    let n = f.n_layers();
    let mut group = c.benchmark_group("decode_k5");
    group.sample_size(20);
    group.bench_function("baseline", |b| {
        b.iter(|| f.decode(MaskVariant::InstrAndExMask, n + 1, false, NEW_TOKENS).unwrap())
    });
    for r in 1..=n {
        group.bench_with_input(BenchmarkId::new("masked", r), &r, |b, &r| {
            b.iter(|| f.decode(MaskVariant::InstrAndExMask, r, false, NEW_TOKENS).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("evicted", r), &r, |b, &r| {
            b.iter(|| f.decode(MaskVariant::InstrAndExMask, r, true, NEW_TOKENS).unwrap())
        });
    }
    group.finish();
}

fn formula(c: &mut Criterion) {
    c.bench_function("savings_formula", |b| {
        b.iter(|| savings_formula(black_box(32), black_box(14), black_box(5)).unwrap())
    });
}

criterion_group!(benches, decode, formula);
criterion_main!(benches);
