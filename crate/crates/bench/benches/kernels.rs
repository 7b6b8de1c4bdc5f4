use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use oce_bench::{uniform, volume};
use oce_core::config::AcquisitionConfig;
use oce_core::nn::{ArchSpec, CnnArch, DenseBlockGeom, Model};
use oce_core::nn::layers::{dense_block_backward, dense_block_forward};
use oce_core::phasepipe::{median_filter_3, preprocess, unwrap_temporal, PreprocessConfig};
use oce_core::velocity::{estimate_velocity, VelocityConfig};
use oce_core::wavesim::{simulate_measurement, NoiseSpec, PhantomSpec};

fn phase(c: &mut Criterion) {
    let series: Vec<f64> = (0..512).map(|i| ((i as f64) * 0.9).sin() * 3.0).collect();
    c.bench_function("unwrap_temporal/512", |b| b.iter(|| unwrap_temporal(black_box(&series))));

    let vol = volume(32, 200, 400, 1);
    let mut g = c.benchmark_group("median_filter_3");
    g.sample_size(10);
    g.bench_function("32x200x400", |b| b.iter(|| median_filter_3(black_box(&vol)).unwrap()));
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let acq = AcquisitionConfig::default();
    let raw = simulate_measurement(&PhantomSpec::default(), &acq, &NoiseSpec::default(), 5e-3, 3).unwrap();
    let cfg = PreprocessConfig::default();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("simulate", |b| {
        b.iter(|| simulate_measurement(&PhantomSpec::default(), &acq, &NoiseSpec::default(), 5e-3, black_box(3)).unwrap())
    });
    g.bench_function("preprocess", |b| b.iter(|| preprocess(black_box(&raw), &cfg).unwrap()));
    let map = preprocess(&raw, &cfg).unwrap().map;
    g.bench_function("estimate_velocity", |b| {
        b.iter(|| estimate_velocity(black_box(&map), &VelocityConfig::default()))
    });
    g.finish();
}

fn dense_block(c: &mut Criterion) {
    let g = DenseBlockGeom {
        cin: 8,
        layers: 4,
        growth: 5,
        kernel: [3, 3, 3],
    };
    let s = [4, 4, 25];
    let plane: usize = s.iter().product();
    let params = uniform(g.param_len(), 2);
    let mut buf = uniform(g.cout() * plane, 3);
    let mut col = vec![0.0f32; g.col_len(s)];
    let mut dcol = col.clone();
    let mut dparams = vec![0.0f32; g.param_len()];
    c.bench_function("dense_block/forward", |b| {
        b.iter(|| dense_block_forward(&g, s, &params, &mut buf, &mut col).unwrap())
    });
    dense_block_forward(&g, s, &params, &mut buf, &mut col).unwrap();
    let dy = uniform(g.cout() * plane, 4);
    c.bench_function("dense_block/backward", |b| {
        b.iter(|| {
            let mut dbuf = dy.clone();
            dense_block_backward(&g, s, &params, &buf, &col, &mut dbuf, &mut dparams, &mut dcol).unwrap()
        })
    });
}

fn networks(c: &mut Criterion) {
    let nets = [
        ("cnn_1dt/16x100", CnnArch::one_dt(8, 16, 100)),
        ("cnn_2dt/4x4x100", CnnArch::two_dt(8, 4, 4, 100)),
    ];
    for (name, arch) in nets {
        let model = Model::<f32>::new(ArchSpec::Cnn(arch), 5).unwrap();
        let x = uniform(model.input_len(), 6);
        let mut ws = model.workspace();
        let mut grad = vec![0.0f32; model.param_count()];
        c.bench_function(&format!("{name}/forward"), |b| b.iter(|| model.forward(black_box(&x), &mut ws).unwrap()));
        c.bench_function(&format!("{name}/forward_backward"), |b| {
            b.iter(|| {
                model.forward(&x, &mut ws).unwrap();
                model.backward(&mut ws, 1.0, &mut grad).unwrap()
            })
        });
    }
}

criterion_group!(benches, phase, pipeline, dense_block, networks);
criterion_main!(benches);
