//! Sequential vs rayon execution of the fan-out paths.
//!
//! Build with `--no-default-features` to see `Parallel` fall back to the
//! sequential loop.

use aga_core::config::RunConfig;
use aga_core::corpus::{generate_corpus, AttributeSpec, Corpus};
use aga_core::eval::{cmc_map, dump_attention_many, evaluate_retrieval};
use aga_core::train::Trainer;
use aga_core::{rng, Exec, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

const MODES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn label(e: Exec) -> &'static str {
    match e {
        Exec::Sequential => "sequential",
        Exec::Parallel => "parallel",
    }
}

fn small_config() -> RunConfig {
    let o: Vec<String> = ["encoder.hidden_dim=32", "encoder.embed_dim=16", "encoder.image_layers=2", "encoder.cross_layers=1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    RunConfig::from_toml("", &o).unwrap()
}

fn corpus(cfg: &RunConfig) -> Corpus {
    generate_corpus(&AttributeSpec::standard(), &cfg.corpus_options(), Exec::Sequential).unwrap()
}

fn bench_cmc(c: &mut Criterion) {
    let (q, g) = (3000, 100);
    let mut r = rng::stream(0, "bench");
    let sim = Tensor::matrix(q, g, (0..q * g).map(|_| r.random::<f64>()).collect()).unwrap();
    let ql: Vec<usize> = (0..q).map(|i| i % g).collect();
    let gl: Vec<usize> = (0..g).collect();
    let mut group = c.benchmark_group("cmc_map");
    for e in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(e)), |b| b.iter(|| cmc_map(&sim, &ql, &gl, e).unwrap()));
    }
    group.finish();
}

fn bench_corpus(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut group = c.benchmark_group("generate_corpus");
    group.sample_size(10);
    for e in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(e)), |b| {
            b.iter(|| generate_corpus(&AttributeSpec::standard(), &cfg.corpus_options(), e).unwrap())
        });
    }
    group.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let cfg = small_config();
    let data = corpus(&cfg);
    let t = Trainer::new(&cfg, &data).unwrap();
    let mut group = c.benchmark_group("evaluate_retrieval");
    group.sample_size(10);
    for e in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(e)), |b| {
            b.iter(|| evaluate_retrieval(&t.model, &t.pair.online, &data, 100, None, e).unwrap())
        });
    }
    group.finish();
}

fn bench_attention_dump(c: &mut Criterion) {
    let cfg = small_config();
    let data = corpus(&cfg);
    let t = Trainer::new(&cfg, &data).unwrap();
    let ids: Vec<usize> = (0..64).collect();
    let mut group = c.benchmark_group("dump_attention_many");
    group.sample_size(10);
    for e in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(e)), |b| {
            b.iter(|| dump_attention_many(&t.model, &t.pair.online, &cfg, &data, &ids, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_cmc, bench_corpus, bench_retrieval, bench_attention_dump);
criterion_main!(benches);
