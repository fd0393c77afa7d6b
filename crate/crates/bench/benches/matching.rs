use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use graphground::geometry::{iou, BBox};
use graphground::matcher::{brute_force_oracle, solve_assignment};
use graphground_bench::chain_instance;

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_assignment");
    for (n, k) in [(3, 5), (5, 5), (5, 10)] {
        let inst = chain_instance(n, k, 0.5, 7);
        group.bench_with_input(BenchmarkId::new("branch_and_bound", format!("{n}x{k}")), &inst, |b, inst| {
            b.iter(|| solve_assignment(black_box(inst), 6))
        });
    }
    let inst = chain_instance(5, 5, 0.5, 7);
    group.bench_function("oracle/5x5", |b| b.iter(|| brute_force_oracle(black_box(&inst)).unwrap()));
    group.finish();
}

fn boxes(c: &mut Criterion) {
    let grid: Vec<BBox> = (0..20)
        .map(|i| {
            let x = (i * 7 % 60) as f64;
            BBox::new(x, x / 2.0, x + 25.0, x / 2.0 + 30.0).unwrap()
        })
        .collect();
    c.bench_function("iou/20x20", |b| {
        b.iter(|| {
            let mut total = 0.0;
            for a in &grid {
                for o in &grid {
                    total += iou(black_box(a), black_box(o));
                }
            }
            total
        })
    });
}

criterion_group!(benches, solver, boxes);
criterion_main!(benches);
