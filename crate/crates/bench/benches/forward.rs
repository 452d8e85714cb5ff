use criterion::{black_box, criterion_group, criterion_main, Criterion};
use golo_bench::detector;
use golo_core::Graph;

fn forward(c: &mut Criterion) {
    let (det, store, image) = detector(0);
    c.bench_function("detector forward 64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::with_params(&store);
            black_box(det.forward(&mut g, &image).unwrap().local.boxes);
        })
    });
}

fn predict(c: &mut Criterion) {
    let (det, store, image) = detector(1);
    c.bench_function("detector predict 64x64", |bench| bench.iter(|| black_box(det.predict(&store, &image).unwrap())));
}

criterion_group!(benches, forward, predict);
criterion_main!(benches);
