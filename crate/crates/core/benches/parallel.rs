use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use leadi_core::exec::Exec;
use leadi_core::model::{IKres, IKresConfig, Task};
use leadi_core::sigproc::{PreprocessConfig, Preprocessor};
use leadi_core::synthgen::{synth_corpus, ParamDistribution};
use leadi_core::training::predict;

fn policies() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn synth(c: &mut Criterion) {
    let dist = ParamDistribution::default();
    let mut group = c.benchmark_group("synth_corpus");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_with_input(BenchmarkId::new(name, 64), &exec, |b, &exec| {
            b.iter(|| synth_corpus(64, &dist, 1, exec))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let corpus = synth_corpus(64, &ParamDistribution::default(), 2, Exec::Parallel);
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let signals: Vec<Vec<f32>> = corpus.records.iter().map(|r| pre.run(r).unwrap()).collect();
    let refs: Vec<&[f32]> = signals.iter().map(Vec::as_slice).collect();
    let model = IKres::<f32>::new(IKresConfig::desk(), Task::Qt, 0).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_with_input(BenchmarkId::new(name, refs.len()), &exec, |b, &exec| {
            b.iter(|| predict(&model, &refs, 16, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, synth, inference);
criterion_main!(benches);
