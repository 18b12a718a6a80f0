use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use laep::clustersim::{evaluate_scenarios, ScenarioInputs};
use laep::prune::{accumulate_markers, prune_trace, PruneConfig, StabilityRule};
use laep::toytrainer::{loss_and_grad, SyntheticTask, TaskSpec, ToyMoEState, TrainConfig};
use laep::tracegen::{generate_with, LoadShape, TraceGenSpec, DEFAULT_ZIPF_S};
use laep::{Execution, ModelStructure};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn structure() -> ModelStructure {
    ModelStructure {
        num_layers: 16,
        experts_per_layer: 64,
        top_k: 2,
        hidden_size: 1024,
        ffn_hidden_size: 4096,
        num_attention_heads: 16,
        attention_hidden_size: 64,
    }
}

fn spec() -> TraceGenSpec {
    TraceGenSpec {
        structure: structure(),
        num_iterations: 200,
        tokens_per_iter: 4096,
        distribution: LoadShape::Zipf { s: DEFAULT_ZIPF_S },
        seed: 1,
    }
}

fn prune_config(layers: usize) -> PruneConfig {
    PruneConfig {
        alpha: vec![0.4; layers],
        beta: 0.1,
        stability: StabilityRule::FixedIteration(0),
        marker_window: 200,
    }
}

fn bench_tracegen(c: &mut Criterion) {
    let spec = spec();
    let mut group = c.benchmark_group("tracegen");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_with(black_box(&spec), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_markers(c: &mut Criterion) {
    let trace = generate_with(&spec(), Execution::Sequential).unwrap();
    let config = prune_config(trace.num_layers());
    let mut group = c.benchmark_group("markers");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| accumulate_markers(black_box(&trace), &config, 0, trace.num_iters(), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_replay(c: &mut Criterion) {
    let structure = structure();
    let trace = generate_with(&spec(), Execution::Sequential).unwrap();
    let outcome = prune_trace(&trace, &prune_config(trace.num_layers()), 2, Execution::Sequential).unwrap();
    let inputs = ScenarioInputs {
        trace: &trace,
        structure: &structure,
        decision: &outcome.decision,
        placement: None,
        num_groups: 8,
        window: outcome.window,
        overhead: 0,
    };
    let mut group = c.benchmark_group("step_time_replay");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_scenarios(black_box(&inputs), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let config = TrainConfig::default();
    let task = SyntheticTask::new(&TaskSpec::default(), config.structure.hidden_size).unwrap();
    let state = ToyMoEState::init(&config, task.num_classes);
    let (x, labels) = task.sample_batch(&mut ChaCha8Rng::seed_from_u64(0), config.batch_tokens);
    let mut group = c.benchmark_group("train_step");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_grad(black_box(&state), &config, &x, &labels, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_tracegen, bench_markers, bench_replay, bench_train_step);
criterion_main!(benches);
