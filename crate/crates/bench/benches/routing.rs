use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use baselayer::{
    assign_greedy, route_and_apply, solve_balanced, AuctionConfig, AuctionSettings, Mode,
};
use baselayer_bench::{random_scores, routing_fixture};

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_balanced");
    group.sample_size(20);
    for &(tokens, experts) in &[(256usize, 8usize), (1024, 16), (4096, 64)] {
        let scores = random_scores(tokens, experts, 1);
        let cfg = AuctionConfig::for_scores(&scores);
        group.throughput(Throughput::Elements(tokens as u64));
        group.bench_with_input(
            BenchmarkId::new("auction", format!("{tokens}x{experts}")),
            &scores,
            |b, s| b.iter(|| solve_balanced(black_box(s), &cfg).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("greedy", format!("{tokens}x{experts}")),
            &scores,
            |b, s| b.iter(|| assign_greedy(black_box(s))),
        );
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("route_and_apply");
    group.sample_size(20);
    for &(experts, blocks) in &[(4usize, 1usize), (4, 2), (8, 1), (8, 2)] {
        let (batches, set) = routing_fixture(experts, 64, 16, blocks);
        group.throughput(Throughput::Elements((experts * 64) as u64));
        for mode in [Mode::Train, Mode::Test] {
            let id = BenchmarkId::new(
                format!("{mode:?}").to_lowercase(),
                format!("E{experts}_blocks{blocks}"),
            );
            group.bench_function(id, |b| {
                b.iter(|| {
                    route_and_apply(
                        black_box(&batches),
                        &set,
                        &AuctionSettings::default(),
                        7,
                        mode,
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, solver, pipeline);
criterion_main!(benches);
