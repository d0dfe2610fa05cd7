use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orpercept_bench::{features, motion_pairs, stacks, values};
use orpercept_core::calibration::solve_hand_eye;
use orpercept_core::crf::{brute_force_filter, PermutohedralLattice};
use orpercept_core::metrics::{compute_metrics, ConfusionMatrix};
use orpercept_core::mvpm::{predict, FixedMerge, MergeNetwork, Merger, NetworkConfig};
use orpercept_core::simulator::NUM_CLASSES;
use orpercept_core::Vec3;
use std::hint::black_box;

fn lattice(c: &mut Criterion) {
    let mut group = c.benchmark_group("lattice");
    group.sample_size(20);
    for d in [3, 5] {
        let f = features(5000, d, d as u64);
        let v = values(5000, NUM_CLASSES, 1);
        group.bench_with_input(BenchmarkId::new("build", d), &f, |b, f| {
            b.iter(|| PermutohedralLattice::new(black_box(f), d).unwrap())
        });
        let lat = PermutohedralLattice::new(&f, d).unwrap();
        group.bench_with_input(BenchmarkId::new("filter", d), &v, |b, v| {
            b.iter(|| lat.filter(black_box(v), NUM_CLASSES).unwrap())
        });
    }
    let f = features(1000, 5, 9);
    let v = values(1000, 1, 2);
    group.bench_function("brute_force_1000", |b| {
        b.iter(|| brute_force_filter(black_box(&f), 5, &v, 1))
    });
    group.finish();
}

fn hand_eye(c: &mut Criterion) {
    let pairs = motion_pairs();
    c.bench_function("hand_eye_sweep", |b| {
        b.iter(|| solve_hand_eye(black_box(&pairs), &Vec3::z()).unwrap())
    });
}

fn merging(c: &mut Criterion) {
    let stacks = stacks(2);
    let net = MergeNetwork::init(NetworkConfig::default(), 3);
    let mut group = c.benchmark_group("merge_40x32");
    group.bench_function("hourglass", |b| {
        b.iter(|| Merger::Network(&net).predict(black_box(&stacks[0].0)).unwrap())
    });
    group.bench_function("max", |b| {
        b.iter(|| Merger::Fixed(FixedMerge::Max).predict(black_box(&stacks[0].0)).unwrap())
    });
    group.bench_function("metrics_8_views", |b| {
        b.iter(|| {
            let mut conf = ConfusionMatrix::new(NUM_CLASSES);
            for (stack, labels) in &stacks {
                conf.accumulate(labels, &predict(&stack.target_confidence()), None)
                    .unwrap();
            }
            compute_metrics(&conf).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, lattice, hand_eye, merging);
criterion_main!(benches);
