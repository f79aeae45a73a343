use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tubelet_bench::{cost_matrix, cost_tensor};
use tubelet_core::matching::{match_per_frame, match_tubelet, solve_assignment};

fn hungarian(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_assignment");
    for (n, m) in [(2, 16), (7, 10), (20, 100)] {
        let costs = cost_matrix(n, m, 1);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{m}")), &costs, |b, costs| {
            b.iter(|| solve_assignment(black_box(costs)).unwrap())
        });
    }
    g.finish();
}

fn matching_modes(c: &mut Criterion) {
    let costs = cost_tensor(4, 16, 16, 2);
    c.bench_function("match_per_frame 4x16x16", |b| b.iter(|| match_per_frame(black_box(&costs)).unwrap()));
    c.bench_function("match_tubelet 4x16x16", |b| b.iter(|| match_tubelet(black_box(&costs)).unwrap()));
}

criterion_group!(benches, hungarian, matching_modes);
criterion_main!(benches);
