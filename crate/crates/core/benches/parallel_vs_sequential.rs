use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sslseg_core::data::{generate_phantom_dataset, PhantomConfig};
use sslseg_core::model::{build_model, HeadKind, UNetConfig};
use sslseg_core::{par, Tape, Tensor};

fn input(b: usize, c: usize, hw: usize) -> Tensor<f32> {
    Tensor::from_fn([b, c, hw, hw], |i| ((i * 7919) % 211) as f32 / 211.0 - 0.5)
}

fn conv_step(x: &Tensor<f32>, w: &Tensor<f32>, bias: &Tensor<f32>) -> f32 {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(bias.clone()));
    let y = tape.conv2d(xv, wv, bv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    tape.grad(wv).unwrap().data()[0]
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    group.sample_size(20);
    let x = input(8, 16, 64);
    let w = input(32, 16, 3);
    let bias = Tensor::zeros([32]);
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        group.bench_function(BenchmarkId::new(label, "b8_c16_64px"), |b| {
            par::set_sequential(sequential);
            b.iter(|| conv_step(&x, &w, &bias));
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let mut group = c.benchmark_group("unet_train_step");
    group.sample_size(10);
    let config = UNetConfig { depth: 3, base_channels: 8, ..UNetConfig::default() };
    let model = build_model::<f32>(&config, 0).unwrap().swap_heads(HeadKind::Regression, 0);
    let x = input(4, 1, 64);
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        group.bench_function(BenchmarkId::new(label, "depth3_b4_64px"), |b| {
            par::set_sequential(sequential);
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, |_| true);
                let xv = tape.constant(x.clone());
                let out = model.forward(&mut tape, &bound, xv).unwrap();
                let loss = tape.mean(out.head_output);
                tape.backward(loss).unwrap();
                bound.gradients(&mut tape).len()
            });
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn bench_phantoms(c: &mut Criterion) {
    let mut group = c.benchmark_group("phantom_generation");
    group.sample_size(10);
    let config = PhantomConfig { height: 64, width: 64, slices: 4, ..PhantomConfig::default() };
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        group.bench_function(BenchmarkId::new(label, "16_subjects"), |b| {
            par::set_sequential(sequential);
            b.iter(|| generate_phantom_dataset(&config, 16).unwrap().len());
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_conv, bench_model, bench_phantoms);
criterion_main!(benches);
