use criterion::{black_box, criterion_group, criterion_main, Criterion};
use odformer_bench::filled;
use odformer_core::nn::Mode;
use odformer_core::{ModelConfig, OdFormer, Session};

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let side = cfg.input_side;
    let (model, store) = OdFormer::new(cfg).unwrap();
    let x = filled(&[1, 3, side, side], 5);
    let mut g = c.benchmark_group("desk");
    g.sample_size(20);
    g.bench_function("forward_eval", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, Mode::Eval);
            let xv = s.input(x.clone());
            black_box(model.forward(&mut s, xv).unwrap())
        })
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, Mode::Train);
            let xv = s.input(x.clone());
            let y = model.forward(&mut s, xv).unwrap();
            let l = s.tape.mean(y).unwrap();
            s.tape.backward(l).unwrap();
            black_box(s.finish())
        })
    });
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
