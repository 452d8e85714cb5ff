use criterion::{black_box, criterion_group, criterion_main, Criterion};
use golo_bench::{cost_matrix, random};
use golo_core::matching::hungarian;
use golo_core::Graph;

fn matmul(c: &mut Criterion) {
    let (a, b) = (random(&[64, 64], 1), random(&[64, 64], 2));
    c.bench_function("matmul 64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let (x, k) = (random(&[16, 32, 32], 3), random(&[16, 16, 3, 3], 4));
    c.bench_function("conv2d 16ch 32x32 3x3", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (x, k) = (g.constant(x.clone()), g.constant(k.clone()));
            black_box(g.conv2d(x, k, 1, 1).unwrap());
        })
    });
}

fn bilinear(c: &mut Criterion) {
    let feat = random(&[64, 16, 16], 5);
    let pts = random(&[160, 2], 6).map(|v| 0.5 + 0.5 * v);
    c.bench_function("bilinear_sample 160 points", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (f, p) = (g.constant(feat.clone()), g.constant(pts.clone()));
            black_box(g.bilinear_sample(f, p).unwrap());
        })
    });
}

fn matching(c: &mut Criterion) {
    let cost = cost_matrix(20, 3, 7);
    c.bench_function("hungarian 20x3", |bench| bench.iter(|| black_box(hungarian(&cost).unwrap())));
    let square = cost_matrix(20, 20, 8);
    c.bench_function("hungarian 20x20", |bench| bench.iter(|| black_box(hungarian(&square).unwrap())));
}

criterion_group!(benches, matmul, conv, bilinear, matching);
criterion_main!(benches);
