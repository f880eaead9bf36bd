use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use odformer_bench::filled;
use odformer_core::nn::{conv2d, softmax, window_merge, window_partition, ConvGeometry};
use odformer_core::Tape;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for side in [32usize, 64] {
        let x = filled(&[1, 16, side, side], 1);
        let w = filled(&[16, 16, 3, 3], 2);
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), true);
                let wv = t.leaf(w.clone(), true);
                let y = conv2d(&mut t, xv, wv, None, ConvGeometry::same((3, 3), (1, 1))).unwrap();
                let l = t.sum(y).unwrap();
                t.backward(l).unwrap();
                black_box(t.grad(wv).map(|g| g[0]))
            })
        });
    }
    g.finish();
}

fn attention_pieces(c: &mut Criterion) {
    let x = filled(&[2, 32, 16, 16], 3);
    c.bench_function("window_roundtrip_m4", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let w = window_partition(&mut t, xv, 4).unwrap();
            black_box(window_merge(&mut t, w, 2, 16, 16).unwrap())
        })
    });
    let logits = filled(&[32, 2, 16, 16], 4);
    c.bench_function("softmax_16x16", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let v = t.constant(logits.clone());
            black_box(softmax(&mut t, v, 3).unwrap())
        })
    });
}

criterion_group!(benches, conv, attention_pieces);
criterion_main!(benches);
