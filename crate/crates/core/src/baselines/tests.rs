use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::approximator::evaluate_centralized;
use crate::linsys::{nominal_model, AgentParams};
use crate::qp::TRAINING_TOL;

fn chain() -> GraphTopology {
    GraphTopology::chain(3).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> JointState {
    JointState::new((0..3).map(|_| DVector::from_vec(vec![rng.random_range(-0.3..1.3), rng.random_range(-1.2..1.2)])).collect())
}

fn replicated(models: Vec<DynamicsParams>, copies: usize) -> ScenarioSet {
    let big_m = models.len();
    ScenarioSet { models: vec![models; copies], noise: vec![vec![vec![0.0; 10]; big_m]; copies] }
}

#[test]
fn identical_scenarios_collapse_to_the_nominal_program() {
    let topo = chain();
    let config = SchemeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (copies, use_true) in [(1, true), (3, false), (5, true)] {
        let models: Vec<DynamicsParams> = (0..3)
            .map(|i| if use_true { true_dynamics(topo.neighbors(i)) } else { sample_inaccurate_model(&mut rng, topo.neighbors(i)) })
            .collect();
        let scheme = MpcScheme::new(
            config.clone(),
            models.iter().cloned().map(AgentParams::from_model).collect(),
            topo.clone(),
        )
        .unwrap();
        let set = replicated(models, copies);
        for _ in 0..4 {
            let s = random_state(&mut rng);
            let program = scenario_program(&set, &config, &topo, &s).unwrap();
            let sol = program.qp.solve(1e-12).unwrap();
            let exact = evaluate_centralized(&scheme, &EvalRequest::value(&s), TRAINING_TOL).unwrap();
            let value = sol.objective + program.constant;
            assert!((value - exact.value).abs() < 1e-8 * (1.0 + exact.value.abs()), "{value} vs {}", exact.value);
            for i in 0..3 {
                for k in 0..10 {
                    let u = sol.u[program.input_index(i, k)];
                    assert!((u - exact.agents[i].u[k][0]).abs() < 1e-8, "agent {i} step {k}: {u} vs {}", exact.agents[i].u[k][0]);
                }
            }
        }
    }
}

#[test]
fn scenario_program_grows_with_scenarios() {
    let topo = chain();
    let config = SchemeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_state(&mut rng);
    let one = ScenarioSet::sample(&mut rng, &topo, 1, 10, ScenarioModel::Inexact, (-0.1, 0.0));
    let many = ScenarioSet::sample(&mut rng, &topo, 25, 10, ScenarioModel::Inexact, (-0.1, 0.0));
    let p1 = scenario_program(&one, &config, &topo, &s).unwrap();
    let p25 = scenario_program(&many, &config, &topo, &s).unwrap();
    assert_eq!(p1.qp.num_inputs(), p25.qp.num_inputs());
    assert_eq!(p25.qp.num_slacks(), 25 * p1.qp.num_slacks());
    let states = |p: &ScenarioProgram| p.full_dimension() - p.qp.num_inputs();
    assert_eq!(states(&p25), 25 * states(&p1));
    assert_eq!(p1.full_dimension(), 3 * (11 * 2 + 10 * 2) + 30);
}

#[test]
fn scenario_sampling_respects_distributions() {
    let topo = chain();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let set = ScenarioSet::sample(&mut rng, &topo, 25, 10, ScenarioModel::True, (-0.1, 0.0));
    assert_eq!(set.len(), 25);
    assert!(set.models.iter().all(|ms| ms.iter().enumerate().all(|(i, d)| *d == true_dynamics(topo.neighbors(i)))));
    assert!(set.noise.iter().flatten().flatten().all(|e| (-0.1..0.0).contains(e)));
    let set = ScenarioSet::sample(&mut rng, &topo, 25, 10, ScenarioModel::Inexact, (0.0, 0.0));
    assert!(set.noise.iter().flatten().flatten().all(|e| *e == 0.0));
    for d in set.models.iter().flatten() {
        assert!((d.a[(0, 0)] - 1.0).abs() <= 0.1 && (d.b[(0, 0)] - 0.0312) >= 0.0 && d.b[(0, 0)] <= 0.0312 + 0.075);
    }
}

#[test]
fn scenario_actions_respect_bounds() {
    let topo = chain();
    let mut smpc = ScenarioMpc::new(SchemeConfig::default(), topo, 5, ScenarioModel::Inexact, (-0.1, 0.0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        for a in smpc.act(&random_state(&mut rng)).unwrap() {
            assert!(a[0] >= -1.0 && a[0] <= 1.0);
        }
    }
    assert!(ScenarioMpc::new(SchemeConfig::default(), chain(), 0, ScenarioModel::True, (0.0, 0.0), 0).is_err());
}

#[test]
fn nominal_policy_is_the_untrained_scheme() {
    let topo = chain();
    let mut nmpc = MpcPolicy::nominal(SchemeConfig::default(), topo.clone(), Evaluator::centralized()).unwrap();
    assert_eq!(nmpc.name(), "nmpc");
    let scheme = MpcScheme::academic(SchemeConfig::default(), topo.clone()).unwrap();
    for i in 0..3 {
        assert_eq!(scheme.params[i], AgentParams::from_model(nominal_model(topo.neighbors(i))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let s = random_state(&mut rng);
        let a = nmpc.act(&s).unwrap();
        let direct = evaluate_centralized(&scheme, &EvalRequest::value(&s), TRAINING_TOL).unwrap();
        assert_eq!(a, direct.actions);
        assert!(a.iter().all(|u| u[0].abs() <= 1.0));
    }
}

struct Zero;

impl Controller for Zero {
    fn name(&self) -> &str {
        "zero"
    }

    fn act(&mut self, state: &JointState) -> Result<Vec<DVector<f64>>, BaselineError> {
        Ok(vec![DVector::zeros(1); state.num_agents()])
    }
}

#[test]
fn resting_at_the_origin_costs_nothing() {
    let topo = chain();
    let env = EnvConfig { noise: (0.0, 0.0), ..EnvConfig::default() };
    let origin = JointState::new(vec![DVector::zeros(2); 3]);
    let out = closed_loop_eval(&mut Zero, &topo, &env, &InitialState::Fixed(origin), 100, &[1, 2]).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|e| e.cost == 0.0 && e.violations == 0));
}

#[test]
fn violations_are_counted_per_agent_and_step() {
    let topo = chain();
    let env = EnvConfig { noise: (0.0, 0.0), ..EnvConfig::default() };
    let start = JointState::new(vec![DVector::zeros(2), DVector::from_vec(vec![-1e-10, 0.0]), DVector::from_vec(vec![-0.2, 0.0])]);
    let out = closed_loop_eval(&mut Zero, &topo, &env, &InitialState::Fixed(start), 1, &[0]).unwrap();
    assert_eq!(out[0].violations, 1);
    assert!((out[0].cost - (0.04 + 100.0 * 0.2 + 100.0 * 1e-10)).abs() < 1e-9);
}

#[test]
fn uniform_starts_depend_on_the_seed_only() {
    let topo = chain();
    let env = EnvConfig::default();
    let a = closed_loop_eval(&mut Zero, &topo, &env, &InitialState::Uniform, 5, &[3, 4]).unwrap();
    let b = closed_loop_eval(&mut Zero, &topo, &env, &InitialState::Uniform, 5, &[3, 4]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].cost, a[1].cost);
}
