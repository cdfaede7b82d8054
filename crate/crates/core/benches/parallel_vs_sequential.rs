//! Parallel against sequential execution for the data-parallel loops.
//! Build with `--no-default-features` to see the parallel arm fall back.

use std::hint::black_box;
use std::path::PathBuf;

use chemtab::baselines::{build_table_from_model, uniform_axis};
use chemtab::chemtab::{build_model, ChemTabModel, TrainConfig};
use chemtab::exec::Execution;
use chemtab::flamelet::{generate, GeneratorConfig, Mechanism};
use chemtab::inference::lookup_batch_chunked;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn desk_model() -> ChemTabModel {
    let species: Vec<String> = ["F", "O", "I", "P1", "P2", "N"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    build_model(&TrainConfig::default(), &species, &species[..5]).unwrap()
}

fn lookups(c: &mut Criterion) {
    let model = desk_model();
    let rows = 16_384;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cpv = Array2::from_shape_simple_fn((rows, model.p()), || rng.gen_range(0.0..1.0));
    let z = Array1::from_shape_simple_fn(rows, || rng.gen_range(0.0..1.0));
    let mut group = c.benchmark_group("lookup_16k_rows");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(lookup_batch_chunked(&model, cpv.view(), z.view(), 1024, exec).unwrap())
            })
        });
    }
    group.finish();
}

fn tables(c: &mut Criterion) {
    let model = desk_model();
    let axes: Vec<Vec<f64>> = (0..=model.p())
        .map(|_| uniform_axis(0.0, 1.0, 16).unwrap())
        .collect();
    let mut group = c.benchmark_group("table_16x16x16x16");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(build_table_from_model(&model, axes.clone(), exec).unwrap()))
        });
    }
    group.finish();
}

fn sweeps(c: &mut Criterion) {
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mech = Mechanism::load(configs.join("desk4.mech.toml")).unwrap();
    let mut cfg = GeneratorConfig::load(configs.join("desk.gen.toml")).unwrap();
    cfg.grid_points = 40;
    cfg.max_flames = 8;
    let mut group = c.benchmark_group("sweep_8_flames");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(generate(&mech, &cfg, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, lookups, tables, sweeps);
criterion_main!(benches);
