use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dhumor_bench::{attention, model, triple};
use dhumor_core::tcrnet::{cross_attention, forward, loss_and_grads, Example, Labels, Mode, Task};
use rand_chacha::ChaCha8Rng;

fn bench_cross_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("cross_attention");
    for &(tokens, dim, heads) in &[(16, 64, 4), (64, 256, 8), (197, 768, 8)] {
        let t = triple(tokens, dim, 1);
        let params = attention(dim, heads, 2);
        let x = t.text.mapv(f64::from);
        let y = t.image.mapv(f64::from);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{tokens}x{dim}")), &(), |b, _| {
            b.iter(|| cross_attention::<ChaCha8Rng>(x.view(), y.view(), &params, None).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let t = triple(32, 128, 3);
    let params = model(128, 8, 4);
    c.bench_function("forward_eval_32x128", |b| b.iter(|| forward(&t, &params, Mode::Eval).unwrap()));
    let batch = [Example { triple: &t, labels: Labels::single(Task::DarkHumor, 1) }];
    c.bench_function("loss_and_grads_32x128", |b| {
        b.iter(|| loss_and_grads(&batch, &params, Mode::Train { seed: 5 }).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_cross_attention, bench_model
}
criterion_main!(benches);
