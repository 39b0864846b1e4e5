//! Compares `par::map` against `par::map_seq` on the two batch shapes the
//! pipeline fans out in practice: whole-sample detection sweeps and
//! per-input concrete replay with temporal classification.
//!
//! `cargo bench -p sleuth-core` measures the rayon-backed `map`;
//! `cargo bench -p sleuth-core --no-default-features` degrades `map` to the
//! sequential path, so the two group entries should then coincide.

use criterion::{criterion_group, criterion_main, Criterion};
use sleuth_core::ltl::{builtin_specs, classify_trace};
use sleuth_core::par;
use sleuth_core::pipeline::corpus::{generate_samples, CorpusSpec};
use sleuth_core::pipeline::{detect_default, DetectConfig};
use sleuth_core::vm::{run_concrete, Program, VmConfig};

fn bench_corpus() -> Vec<(bool, Program)> {
    let spec = CorpusSpec {
        name: "bench".into(),
        seed: 9,
        malicious: 6,
        benign: 6,
        trigger_bytes: 1,
        decoy_levels: 2,
        variants: 1,
    };
    generate_samples(&spec)
        .expect("bench corpus generates")
        .into_iter()
        .map(|(meta, program)| (meta.behavior.is_some(), program))
        .collect()
}

/// Coarse-grained batch: one detection run per corpus sample. This is the
/// shape `run_benchmark` and the corpus evaluation loops use.
fn detect_sweep(c: &mut Criterion) {
    let programs: Vec<Program> = bench_corpus().into_iter().map(|(_, p)| p).collect();
    let config = DetectConfig {
        budget_paths: 24,
        ..DetectConfig::default()
    };

    let mut group = c.benchmark_group("detect-sweep");
    group.sample_size(10);
    group.bench_function("map", |b| {
        b.iter(|| {
            par::map(&programs, |p| detect_default(p, &config).malicious)
                .into_iter()
                .filter(|m| *m)
                .count()
        })
    });
    group.bench_function("map_seq", |b| {
        b.iter(|| {
            par::map_seq(&programs, |p| detect_default(p, &config).malicious)
                .into_iter()
                .filter(|m| *m)
                .count()
        })
    });
    group.finish();
}

/// Fine-grained batch: replay one program on many inputs and classify each
/// trace. Items are cheap, so this probes fan-out overhead rather than
/// speedup.
fn replay_classify(c: &mut Criterion) {
    let program = bench_corpus()
        .into_iter()
        .find(|(malicious, _)| *malicious)
        .map(|(_, p)| p)
        .expect("corpus has a malicious sample");
    let specs = builtin_specs();
    let cfg = VmConfig::default();
    let inputs: Vec<Vec<u8>> = (0u16..256)
        .map(|b| vec![b as u8, (b as u8).wrapping_mul(31)])
        .collect();

    let mut group = c.benchmark_group("replay-classify");
    group.bench_function("map", |b| {
        b.iter(|| -> usize {
            par::map(&inputs, |input| {
                let trace = run_concrete(&program, input, 4096, &cfg);
                classify_trace(&trace, &specs).len()
            })
            .into_iter()
            .sum()
        })
    });
    group.bench_function("map_seq", |b| {
        b.iter(|| -> usize {
            par::map_seq(&inputs, |input| {
                let trace = run_concrete(&program, input, 4096, &cfg);
                classify_trace(&trace, &specs).len()
            })
            .into_iter()
            .sum()
        })
    });
    group.finish();
}

criterion_group!(benches, detect_sweep, replay_classify);
criterion_main!(benches);
