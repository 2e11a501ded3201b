// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential vs. parallel layer sweep on the fixture model.

use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchlab::datagen::{generate_contextual_suite, Lexicon};
use patchlab::exec::Executor;
use patchlab::model::{Model, ModelConfig};
use patchlab::patching::{layer_sweep, PositionMode, PreparedPair};
use patchlab::probe::Probe;
use patchlab::tokenizer::Tokenizer;

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn bench_sweep(c: &mut Criterion) {
    let a = assets();
    let tok = Tokenizer::load(a.join("gpt2/encoder.json"), a.join("gpt2/vocab.bpe")).unwrap();
    let fixture = a.join("fixtures/tiny-gpt2");
    let model = Model::load(&fixture, ModelConfig::tiny_fixture()).unwrap();
    let probe = Probe::load(&fixture.join("probe")).unwrap();
    let pairs = generate_contextual_suite(&Lexicon::builtin(), 3, 8_000)
        .unwrap()
        .subsample(0.01, 4)
        .unwrap()
        .pairs;

    let mut group = c.benchmark_group("sweep_80_pairs");
    group.sample_size(10);
    for (name, exec) in [("sequential", Executor::sequential()), ("parallel", Executor::new(0).unwrap())] {
        group.bench_with_input(BenchmarkId::new(name, exec.workers()), &exec, |b, exec| {
            b.iter(|| {
                exec.try_map(&pairs, |p| {
                    let prepared = PreparedPair::new(&model, &probe, &tok, p)?;
                    layer_sweep(&model, &probe, &prepared, PositionMode::All)
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
