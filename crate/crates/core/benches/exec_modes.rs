//! Sequential vs parallel execution of the data-parallel loops.
//!
//! Run with: cargo bench -p lacvis-core --bench exec_modes

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lacvis_core::encoder::{build_encoder, EffectiveFields, EncoderConfig};
use lacvis_core::lac::{synthesize, LacParams};
use lacvis_core::par::{with_exec, Exec};
use lacvis_core::training::{SceneConfig, SceneGenerator};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_modes(c: &mut Criterion) {
    let enc = build_encoder(&EncoderConfig::default(), 1).unwrap();
    let gen = SceneGenerator::new(&SceneConfig::default(), 2).unwrap();
    let x = gen.sample(0).image;
    let trace = enc.forward(&x).unwrap();
    let params = LacParams::init(&enc, 1e-5);
    let deepest = trace.depth() - 1;

    let mut g = c.benchmark_group("synthesis");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_exec(mode, || synthesize(&enc, &trace, &params, deepest).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("effective_fields");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_exec(mode, || EffectiveFields::compute(&enc, &trace).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("scenes_64");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_exec(mode, || black_box(gen.dataset(0, 64))))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
