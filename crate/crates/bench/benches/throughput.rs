use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use weakmil::eval::Granularity;
use weakmil::model::deep_mil_backward;
use weakmil::{extract_segment_features, tune_threshold, Model, Segment, SplitMix64, BUILTIN_DIM};
use weakmil_bench::{clean_scores, random_bag, segment_video};

fn features(c: &mut Criterion) {
    let video = segment_video();
    let mut g = c.benchmark_group("features");
    g.throughput(Throughput::Elements(video.len() as u64));
    g.bench_function("segment_112x112x16", |b| {
        b.iter(|| extract_segment_features(black_box(&Segment::new(video.frames()))).unwrap())
    });
    g.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::init(BUILTIN_DIM, &[512, 32], None, &mut SplitMix64::new(3)).unwrap();
    let bag = random_bag("b", 4);
    let mut g = c.benchmark_group("model");
    g.throughput(Throughput::Elements(bag.n_segments() as u64));
    g.bench_function("score_bag_32x1176", |b| b.iter(|| model.head.score_bag(black_box(&bag)).unwrap()));
    let (a, n) = (random_bag("a", 5), random_bag("n", 6));
    g.bench_function("backward_one_pair", |b| {
        b.iter(|| deep_mil_backward(black_box(&[(&a, &n)]), &model, 1e-3, None).unwrap())
    });
    g.finish();
}

fn tuning(c: &mut Criterion) {
    let scores = clean_scores(1_000_000, 7);
    let mut g = c.benchmark_group("tune");
    g.throughput(Throughput::Elements(scores.len() as u64));
    g.sample_size(10);
    g.bench_function("one_million_clean", |b| {
        b.iter(|| tune_threshold(black_box(&scores), 1e-3, Granularity::Bag).unwrap())
    });
    g.finish();
}

criterion_group!(benches, features, forward, tuning);
criterion_main!(benches);
