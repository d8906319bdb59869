use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ucmnet::model::UcmBlock;
use ucmnet::nn::{Conv2d, Mode};
use ucmnet::{Network, NetworkConfig, ParamStore, Tape, Tensor};

fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as f32) * 0.37).sin())
}

fn conv(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::new(&mut store, "conv", 16, 16, 3, true, 1);
    let x = input(&[1, 16, 64, 64]);
    c.bench_function("conv3x3 16->16 64x64 forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            let loss = conv.forward(&tape, &store, v).unwrap().sum().unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn ucm_block(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let block = UcmBlock::new(&mut store, "ucm", 24, 0.01, 1);
    let x = input(&[1, 24, 32, 32]);
    c.bench_function("ucm block 24ch 32x32 forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            black_box(block.forward(&tape, &mut store, v, Mode::Eval).unwrap().value());
        })
    });
}

fn network(c: &mut Criterion) {
    let cfg = NetworkConfig::default();
    let (h, w) = cfg.input_size;
    let x = input(&[1, cfg.input_channels, h, w]);
    let mut net = Network::<f32>::new(cfg, 1).unwrap();
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function(format!("predict 1x{h}x{w}"), |b| b.iter(|| black_box(net.predict(&x).unwrap())));
    group.finish();
}

criterion_group!(benches, conv, ucm_block, network);
criterion_main!(benches);
