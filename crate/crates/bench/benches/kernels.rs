use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deformkit::autograd::{conv3d, correlation_local, selective_scan, warp, ScanInputs, Var};
use deformkit::models::{RegistrationModel, VariantConfig, VariantName};
use deformkit::nn::Ctx;
use deformkit::{Dims3, Tensor};

fn wave(shape: &[usize], k: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * k).sin()).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let x = Var::constant(wave(&[16, 32, 32, 32], 0.13));
    let w = Var::constant(wave(&[16, 16, 3, 3, 3], 0.71).scale(0.05));
    c.bench_function("conv3d 16->16 k3 32^3", |b| b.iter(|| black_box(conv3d(&x, &w, None, 1))));

    let src = Var::constant(wave(&[1, 32, 32, 32], 0.05));
    let flow = Var::constant(wave(&[3, 32, 32, 32], 0.31).scale(2.0));
    c.bench_function("warp 32^3", |b| b.iter(|| black_box(warp(&src, &flow))));

    let ft = Var::constant(wave(&[32, 16, 16, 16], 0.17));
    let fs = Var::constant(wave(&[32, 16, 16, 16], 0.23));
    c.bench_function("correlation r=2 32ch 16^3", |b| b.iter(|| black_box(correlation_local(&ft, &fs, 2))));

    let (l, e, n) = (4096, 32, 16);
    let u = Var::constant(wave(&[l, e], 0.3));
    let delta = Var::constant(wave(&[l, e], 0.7).map(|v| 0.1 + 0.05 * v.abs()));
    let a = Var::constant(wave(&[e, n], 0.9).map(|v| -1.0 - v.abs()));
    let bm = Var::constant(wave(&[l, n], 0.4));
    let cm = Var::constant(wave(&[l, n], 0.6));
    let d = Var::constant(Tensor::ones(vec![e]));
    let inp = ScanInputs { u: &u, delta: &delta, a: &a, b: &bm, c: &cm, d: &d };
    c.bench_function("selective scan L=4096 E=32 N=16", |b| b.iter(|| black_box(selective_scan(&inp))));
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward 32^3 half width");
    g.sample_size(10);
    let ext = Dims3::cube(32);
    let t = Var::constant(wave(&ext.shape_with_channels(1), 0.37).map(|v| (v + 1.0) / 2.0));
    let s = Var::constant(wave(&ext.shape_with_channels(1), 0.41).map(|v| (v + 1.0) / 2.0));
    for v in [VariantName::Vxm, VariantName::Dwp, VariantName::Dwcpi] {
        let m = RegistrationModel::build(&VariantConfig::desk(v, ext, 2)).unwrap();
        g.bench_function(v.as_str(), |b| b.iter(|| black_box(m.forward(&Ctx::eval(&m.params), &t, &s).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, kernels, forward);
criterion_main!(benches);
