//! Sequential versus rayon execution of the inference-heavy paths.
//! Build with `--no-default-features` to see the fallback on its own.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use duatm::data::{generate_synthetic, Dataset, SyntheticSpec};
use duatm::evaluator::evaluate;
use duatm::extractor::{ExtractorConfig, ExtractorKind};
use duatm::matcher::{pairwise_distances, DistanceMode};
use duatm::model::{Model, ModelConfig};
use duatm::parallel::Execution;

const EXECUTIONS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (Model, Dataset) {
    let spec = SyntheticSpec::standard();
    let (manifest, seqs) = generate_synthetic(&spec).unwrap();
    let data = Dataset::from_sequences(&manifest, seqs).unwrap();
    let model = Model::new(
        ModelConfig {
            extractor: ExtractorConfig {
                kind: ExtractorKind::Embedding,
                input_channels: spec.dim,
                dim: spec.dim,
                conv_channels: vec![],
                cell: Default::default(),
            },
            mode: DistanceMode::Duatm,
            num_identities: spec.num_identities,
        },
        0,
    )
    .unwrap();
    (model, data)
}

fn pairwise(c: &mut Criterion) {
    let (model, data) = setup();
    let inputs: Vec<_> = data.inputs.iter().take(64).collect();
    let mut group = c.benchmark_group("pairwise_distances");
    for mode in [DistanceMode::Duatm, DistanceMode::Avepool] {
        let embedded = model.embed_all(&inputs, mode, Execution::Sequential).unwrap();
        for (name, exec) in EXECUTIONS {
            group.bench_with_input(BenchmarkId::new(name, mode), &embedded, |b, e| {
                b.iter(|| pairwise_distances(black_box(e), mode, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn full_evaluation(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in EXECUTIONS {
        group.bench_function(name, |b| b.iter(|| evaluate(&model, black_box(&data), DistanceMode::Duatm, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, pairwise, full_evaluation);
criterion_main!(benches);
