use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msnic_bench::{coder_stream, toy_batch};
use msnic_core::codec::{encode_image, range_decode, range_encode, QuantMode};
use msnic_core::estimators::pathwise_grad;
use msnic_core::harness::presets;
use msnic_core::objectives::evaluate;
use msnic_core::tensor::log_mean_exp;
use msnic_core::{GridMode, SeededRng, Tape};

fn coder(c: &mut Criterion) {
    let (syms, pmfs) = coder_stream(4096, 1);
    let refs: Vec<_> = pmfs.iter().collect();
    let bytes = range_encode(&syms, &refs).unwrap();
    let mut g = c.benchmark_group("range_coder");
    g.bench_function("encode_4096", |b| b.iter(|| range_encode(&syms, &refs).unwrap()));
    g.bench_function("decode_4096", |b| b.iter(|| range_decode(&bytes, &refs).unwrap()));
    g.finish();

    let model = presets::smoke_model(true);
    let img = presets::eval_data().images[0].clone();
    c.bench_function("encode_image_16x16", |b| {
        b.iter(|| encode_image(&model, &img, 0.01, QuantMode::Round, 0).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let model = presets::smoke_model(true);
    let x = toy_batch(8);
    c.bench_function("toy_analysis_synthesis_b8", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            let bm = model.bind(&tape);
            let xv = tape.constant(x.clone());
            let q = bm.infer_y(&xv).unwrap();
            bm.synthesize(q.mean()).value().sum()
        })
    });
}

fn objective(c: &mut Criterion) {
    let model = presets::smoke_model(true);
    let x = toy_batch(8);
    let mut g = c.benchmark_group("objective_b8");
    for (mode, k, l) in [(GridMode::Elbo, 1, 1), (GridMode::Mix, 4, 1), (GridMode::Dms, 4, 4)] {
        let id = format!("{}_k{k}_l{l}", mode.name());
        g.bench_with_input(BenchmarkId::new("forward", &id), &(mode, k, l), |b, &(mode, k, l)| {
            b.iter(|| {
                let tape = Tape::no_grad();
                let bm = model.bind(&tape);
                let xv = tape.constant(x.clone());
                evaluate(&bm, &xv, mode, k, l, 0.01, &mut SeededRng::new(3, 0)).unwrap().report.total
            })
        });
        g.bench_with_input(BenchmarkId::new("gradient", &id), &(mode, k, l), |b, &(mode, k, l)| {
            b.iter(|| pathwise_grad(&model, &x, mode, k, l, 0.01, 3).unwrap())
        });
    }
    g.finish();
}

fn lme(c: &mut Criterion) {
    let t = SeededRng::new(5, 0).normal(&[64, 256], 0.0, 30.0);
    c.bench_function("log_mean_exp_64x256", |b| b.iter(|| log_mean_exp(&t, 1)));
}

criterion_group!(benches, coder, conv, objective, lme);
criterion_main!(benches);
