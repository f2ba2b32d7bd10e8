//! Sequential vs data-parallel execution of the heavier kernels.
//!
//! `cargo bench -p ubgan --bench parallel`. Both variants run the same
//! binary; the switch is `par::set_parallel`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ubgan::conditioning::{mel_stream, MelConfig};
use ubgan::pqmf::{analysis, white_noise, PrototypeFilter};
use ubgan::{extend, par, AudioBuffer, CondSource, Generator, GeneratorConfig};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bench_pqmf(c: &mut Criterion) {
    let p = PrototypeFilter::default_for(8).unwrap();
    let x = AudioBuffer::new(white_noise(32000 * 4, 1), 32000).unwrap();
    let mut g = c.benchmark_group("pqmf_analysis_8band_4s");
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| analysis(&x, p).unwrap())
        });
    }
    g.finish();
}

fn bench_mel(c: &mut Criterion) {
    let x = AudioBuffer::new(white_noise(16000 * 4, 2), 16000).unwrap();
    let cfg = MelConfig::default();
    let mut g = c.benchmark_group("mel_stream_4s");
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| mel_stream(&x, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_extend(c: &mut Criterion) {
    let m = Generator::init(GeneratorConfig::blind(), 1).unwrap();
    let x = AudioBuffer::new(white_noise(16000, 3).iter().map(|v| v * 0.3).collect(), 16000).unwrap();
    let mut g = c.benchmark_group("extend_blind_1s");
    g.sample_size(10);
    for (name, on) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| extend(&x, CondSource::Blind, &m).unwrap())
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, bench_pqmf, bench_mel, bench_extend);
criterion_main!(benches);
