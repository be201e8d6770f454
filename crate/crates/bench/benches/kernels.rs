use criterion::{black_box, criterion_group, criterion_main, Criterion};

use qmamba_core::approx::{fit_silu_default, range_norm, RangeNormParams};
use qmamba_core::mamba::{
    quantize_model, random_frames, random_weights, reference_forward, ssm_scan, MambaConfig,
};
use qmamba_core::pipesim::{simulate, PipelineConfig, StageLatencyTable};
use qmamba_core::qnum::{quantize, RealTensor};

fn bench_quantize(c: &mut Criterion) {
    let data: Vec<f32> = (0..4096).map(|i| ((i * 37 % 997) as f32 - 498.0) / 498.0).collect();
    let t = RealTensor::from_vec(data);
    c.bench_function("quantize_4096_int8", |b| {
        b.iter(|| quantize(black_box(&t), -7, 8).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    c.bench_function("fit_silu_default", |b| b.iter(|| fit_silu_default().unwrap()));
}

fn bench_range_norm(c: &mut Criterion) {
    let x = qmamba_core::QTensor::new(
        (0..320).map(|i| ((i * 53) % 255) as i64 - 127).collect(),
        vec![16, 20],
        8,
        -7,
    )
    .unwrap();
    let params = RangeNormParams {
        gamma: quantize(&RealTensor::from_vec(vec![1.0; 20]), -8, 16).unwrap(),
        beta: quantize(&RealTensor::from_vec(vec![0.0; 20]), -8, 16).unwrap(),
        out_scale_exp: -7,
        out_bits: 8,
    };
    c.bench_function("range_norm_16x20", |b| {
        b.iter(|| range_norm(black_box(&x), &params).unwrap())
    });
}

fn mars_prepared() -> (qmamba_core::mamba::PreparedModel, Vec<RealTensor>, MambaConfig) {
    let config = MambaConfig::mars();
    let weights = random_weights(&config, 42);
    let frames = random_frames(&config, 4, 7);
    let model = quantize_model(&config, &weights, &frames, 1.0).unwrap();
    (model.prepare().unwrap(), frames, config)
}

fn bench_forward(c: &mut Criterion) {
    let (prepared, frames, config) = mars_prepared();
    c.bench_function("model_forward_mars", |b| {
        b.iter(|| prepared.forward_real(black_box(&frames[0])).unwrap())
    });
    let weights = random_weights(&config, 42);
    c.bench_function("reference_forward_mars", |b| {
        b.iter(|| reference_forward(black_box(&frames[0]), &config, &weights, None).unwrap())
    });
}

fn bench_scan(c: &mut Criterion) {
    let (prepared, _, config) = mars_prepared();
    let blk = &prepared.blocks[0];
    let ed = config.inner_dim();
    let tokens = qmamba_core::QTensor::new(
        (0..16 * ed).map(|i| ((i * 31) % 200) as i64 - 100).collect(),
        vec![16, ed],
        8,
        blk.scales.main_act,
    )
    .unwrap();
    c.bench_function("ssm_scan_16x40", |b| {
        b.iter(|| ssm_scan(black_box(&tokens), blk).unwrap())
    });
}

fn bench_simulate(c: &mut Criterion) {
    let pc = PipelineConfig::mars(20);
    let table = StageLatencyTable::emamba();
    c.bench_function("simulate_mars_emamba", |b| {
        b.iter(|| simulate(black_box(&pc), &table).unwrap())
    });
}

criterion_group!(
    benches,
    bench_quantize,
    bench_fit,
    bench_range_norm,
    bench_forward,
    bench_scan,
    bench_simulate
);
criterion_main!(benches);
