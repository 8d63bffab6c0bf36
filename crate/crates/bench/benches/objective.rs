use criterion::{criterion_group, criterion_main, Criterion};
use paraformer::metrics::evaluate_many;
use paraformer::plat::plat_objective;
use paraformer::{argmax_labels, intersect_mask};
use paraformer_bench::{labels, normal, rng};

fn objective(c: &mut Criterion) {
    let mut r = rng(3);
    let ys: Vec<_> = (0..4).map(|_| labels(&mut r, 64, 64, 4, 0.05)).collect();
    let primal = normal(&[4, 4, 64, 64]);
    let fused = normal(&[4, 4, 64, 64]);
    c.bench_function("plat_objective/4x64x64", |b| b.iter(|| plat_objective(&ys, &primal, &fused).unwrap()));
    let pred = argmax_labels(&primal).unwrap();
    c.bench_function("intersect_mask/64x64", |b| b.iter(|| intersect_mask(&ys[0], &pred[0]).unwrap()));
}

fn miou(c: &mut Criterion) {
    let mut r = rng(4);
    let gt: Vec<_> = (0..8).map(|_| labels(&mut r, 256, 256, 4, 0.02)).collect();
    let pred: Vec<_> = (0..8).map(|_| labels(&mut r, 256, 256, 4, 0.0)).collect();
    c.bench_function("evaluate_many/8x256x256", |b| {
        b.iter(|| evaluate_many(pred.iter().zip(gt.iter()), 4).unwrap())
    });
}

criterion_group!(benches, objective, miou);
criterion_main!(benches);
