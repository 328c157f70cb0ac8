use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sst_bench::normal;
use sst_core::scaling::{bench_model, BenchConfig, BenchModel};
use sst_core::Tape;

fn forward_backward(c: &mut Criterion) {
    let cfg = BenchConfig::default();
    let mut g = c.benchmark_group("forward_backward");
    g.sample_size(10);
    for kind in BenchModel::ALL {
        for l in [96, 384, 1536] {
            let model = bench_model(kind, l, &cfg).unwrap();
            let x = normal(l as u64, &[1, l, 1]);
            g.bench_with_input(BenchmarkId::new(kind.as_str(), l), &l, |bch, _| {
                bch.iter(|| {
                    let tape = Tape::with_params(model.params());
                    let out = model.forward(&tape, &x).unwrap();
                    let loss = tape.mean(tape.mul(out.pred, out.pred).unwrap()).unwrap();
                    tape.backward(loss).unwrap()
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
