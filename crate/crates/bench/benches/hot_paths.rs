use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use drw_core::detect::detect_watermark;
use drw_core::spectral::lomb_scargle;
use drw_core::watermark::apply_watermark;
use drw_core::{
    DetectionParams, FrequencyGrid, HashRole, KeyParams, OutputMode, ProbabilityVector, ProbeRecord, ProbeSeries,
    WatermarkConfig, WatermarkKey,
};

fn key() -> WatermarkKey {
    WatermarkKey::generate(&KeyParams::default(), 7).unwrap()
}

fn bench_hash(c: &mut Criterion) {
    let key = key();
    c.bench_function("hash/phase", |b| {
        let mut x = 0usize;
        b.iter(|| {
            x = (x + 1) % key.vocab_size();
            black_box(key.hash(HashRole::Phase, x).unwrap())
        })
    });
    c.bench_function("hash/table_2000", |b| b.iter(|| black_box(key.hash_table(HashRole::Phase))));
}

fn bench_watermark(c: &mut Criterion) {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Soft).unwrap();
    let p = ProbabilityVector::new(vec![0.7, 0.3]).unwrap();
    c.bench_function("watermark/soft", |b| {
        let mut x = 0usize;
        b.iter(|| {
            x = (x + 1) % key.vocab_size();
            black_box(apply_watermark(&key, &cfg, x, &p).unwrap())
        })
    });
}

fn noisy_series(n: usize) -> ProbeSeries {
    let mut rng = ChaCha20Rng::seed_from_u64(n as u64);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y = t
        .iter()
        .map(|&t| (2.0 * std::f64::consts::PI * 16.0 * t).cos() + rng.random::<f64>() - 0.5)
        .collect();
    ProbeSeries::new(t, y).unwrap()
}

fn bench_lomb_scargle(c: &mut Criterion) {
    let grid = FrequencyGrid::default();
    let mut group = c.benchmark_group("lomb_scargle");
    for n in [64, 512, 2000] {
        let series = noisy_series(n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &series, |b, s| {
            b.iter(|| black_box(lomb_scargle(s, &grid)))
        });
    }
    group.finish();
}

fn bench_detect(c: &mut Criterion) {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let records: Vec<ProbeRecord> = (0..key.vocab_size())
        .map(|x| {
            let p = ProbabilityVector::new(vec![0.6, 0.4]).unwrap();
            ProbeRecord::soft(x, apply_watermark(&key, &cfg, x, &p).unwrap().0)
        })
        .collect();
    let params = DetectionParams::default();
    c.bench_function("detect/2000_soft", |b| {
        b.iter(|| black_box(detect_watermark(&key, &cfg, &records, &params).unwrap()))
    });
}

criterion_group!(benches, bench_hash, bench_watermark, bench_lomb_scargle, bench_detect);
criterion_main!(benches);
