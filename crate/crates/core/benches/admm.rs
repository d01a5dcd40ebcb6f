use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmpcrl::approximator::{evaluate_distributed, EvalRequest, EvalSettings, MpcScheme, SchemeConfig};
use dmpcrl::consensus::AdmmSettings;
use dmpcrl::exec::Execution;
use dmpcrl::linsys::JointState;
use dmpcrl::topology::GraphTopology;
use nalgebra::DVector;

fn distributed_evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("distributed_evaluation");
    group.sample_size(10);
    for agents in [3, 8] {
        let scheme = MpcScheme::academic(SchemeConfig::default(), GraphTopology::chain(agents).unwrap()).unwrap();
        let state = JointState::new((0..agents).map(|i| DVector::from_vec(vec![0.1 * (i % 5) as f64, 0.0])).collect());
        for (label, execution) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            let settings = EvalSettings { admm: AdmmSettings { rho: 0.5, iterations: 20, execution }, ..EvalSettings::default() };
            group.bench_with_input(BenchmarkId::new(label, agents), &settings, |b, settings| {
                b.iter(|| evaluate_distributed(&scheme, &EvalRequest::value(black_box(&state)), settings).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, distributed_evaluation);
criterion_main!(benches);
