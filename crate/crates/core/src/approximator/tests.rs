use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::consensus::{AdmmSettings, ConsensusSubproblem};
use crate::exec::Execution;
use crate::linsys::nominal_model;
use crate::qp;

fn chain_scheme() -> MpcScheme {
    MpcScheme::academic(SchemeConfig::default(), GraphTopology::chain(3).unwrap()).unwrap()
}

/// Same network with nonzero coupling matrices.
fn coupled_scheme() -> MpcScheme {
    let topo = GraphTopology::chain(3).unwrap();
    let params = (0..3).map(|i| AgentParams::from_model(crate::linsys::true_dynamics(topo.neighbors(i)))).collect();
    MpcScheme::new(SchemeConfig::default(), params, topo).unwrap()
}

fn decoupled_scheme() -> MpcScheme {
    let topo = GraphTopology::with_communication(3, [], [(0, 1), (1, 2)]).unwrap();
    MpcScheme::academic(SchemeConfig::default(), topo).unwrap()
}

fn settings(iterations: usize, gac_rounds: usize) -> EvalSettings {
    EvalSettings {
        admm: AdmmSettings { rho: 0.5, iterations, execution: Execution::Sequential },
        gac_rounds,
        tol: qp::TRAINING_TOL,
    }
}

fn random_state(rng: &mut ChaCha8Rng, m: usize) -> JointState {
    JointState::new(
        (0..m).map(|_| DVector::from_vec(vec![rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)])).collect(),
    )
}

/// States that leave room to stay inside the bounds under the unstable coupled model.
fn interior_state(rng: &mut ChaCha8Rng, m: usize) -> JointState {
    JointState::new(
        (0..m).map(|_| DVector::from_vec(vec![rng.random_range(0.3..0.7), rng.random_range(-0.3..0.3)])).collect(),
    )
}

fn random_action(rng: &mut ChaCha8Rng, m: usize) -> Vec<DVector<f64>> {
    (0..m).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect()
}

fn zero_state(m: usize) -> JointState {
    JointState::new(vec![DVector::zeros(2); m])
}

#[test]
fn local_program_dimensions() {
    let config = SchemeConfig { horizon: 1, ..SchemeConfig::default() };
    let topo = GraphTopology::with_communication(2, [], [(0, 1)]).unwrap();
    let scheme = MpcScheme::academic(config, topo).unwrap();
    let s = zero_state(2);
    let local = LocalQp::new(&scheme, 0, &EvalRequest::value(&s), 0.5, 1e-10).unwrap();
    // x(0), x(1), u(0), sigma(0)
    assert_eq!(local.dim(), 2 * 2 + 1 + 2);
    assert_eq!(local.shared_len(), 0);
    assert!(local.min_reduced_eigenvalue() > qp::CONVEXITY_FLOOR);

    let scheme = chain_scheme();
    let local = LocalQp::new(&scheme, 1, &EvalRequest::value(&s_of(3)), 0.5, 1e-10).unwrap();
    assert_eq!(local.dim(), 22 + 10 + 20 + 2 * 20);
    assert_eq!(local.shared_len(), 60);
    assert!(local.min_reduced_eigenvalue() > qp::CONVEXITY_FLOOR);
}

fn s_of(m: usize) -> JointState {
    JointState::new(vec![DVector::from_vec(vec![0.5, 0.0]); m])
}

#[test]
fn action_constraint_only_in_q_mode() {
    let scheme = chain_scheme();
    let v = AgentRows::new(&scheme, false);
    let q = AgentRows::new(&scheme, true);
    assert_eq!(q.num_eq(), v.num_eq() + 1);
    assert_eq!(v.num_eq(), 2 + 10 * 2);
    // u(0) keeps no box rows once fixed
    assert_eq!(v.num_ineq(), 3 * 20 + 2 * 10);
    assert_eq!(q.num_ineq(), 3 * 20 + 2 * 9);
    let s = s_of(3);
    let a = vec![DVector::from_element(1, 0.2); 3];
    let qp_v = central_qp(&scheme, &EvalRequest::value(&s)).unwrap();
    let qp_q = central_qp(&scheme, &EvalRequest::q(&s, &a)).unwrap();
    assert_eq!(qp_q.num_eq(), qp_v.num_eq() + 3);
}

#[test]
fn rejects_out_of_box_actions_and_bad_shapes() {
    let scheme = chain_scheme();
    let s = s_of(3);
    let a = vec![DVector::from_element(1, 1.5); 3];
    assert!(matches!(
        evaluate_centralized(&scheme, &EvalRequest::q(&s, &a), 1e-10),
        Err(ApproxError::ActionOutOfBounds { agent: 0, .. })
    ));
    let short = JointState::new(vec![DVector::zeros(2); 2]);
    assert!(matches!(evaluate_centralized(&scheme, &EvalRequest::value(&short), 1e-10), Err(ApproxError::Dimension(_))));
}

#[test]
fn origin_is_the_unconstrained_optimum() {
    let scheme = chain_scheme();
    let s = zero_state(3);
    let r = evaluate_centralized(&scheme, &EvalRequest::value(&s), 1e-10).unwrap();
    assert!(r.value.abs() < 1e-9, "{}", r.value);
    assert!(r.actions.iter().all(|a| a[0].abs() < 1e-9));
}

#[test]
fn local_cost_matches_program_objective() {
    let mut scheme = chain_scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut thetas = scheme.thetas();
    for t in &mut thetas {
        t[0] = rng.random_range(-1.0..1.0);
        for k in 7..10 {
            t[k] = rng.random_range(-0.5..0.5);
        }
    }
    scheme.set_thetas(&thetas).unwrap();
    scheme.config.terminal_weight = Some(nalgebra::DMatrix::identity(2, 2) * 0.3);
    let s = random_state(&mut rng, 3);
    let a = random_action(&mut rng, 3);
    let req = EvalRequest::q(&s, &a);
    let program = central_qp(&scheme, &req).unwrap();
    let kkt = qp::solve(&program, 1e-10).unwrap();
    let r = evaluate_centralized(&scheme, &req, 1e-10).unwrap();
    assert!((r.value - kkt.objective).abs() < 1e-9 * (1.0 + kkt.objective.abs()));
}

#[test]
fn distributed_value_matches_centralized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (scheme, coupled) in [(chain_scheme(), false), (coupled_scheme(), true), (coupled_scheme(), true), (chain_scheme(), false)] {
        let s = if coupled { interior_state(&mut rng, 3) } else { random_state(&mut rng, 3) };
        let a = random_action(&mut rng, 3);
        for req in [EvalRequest::q(&s, &a), EvalRequest::value(&s)] {
            let c = evaluate_centralized(&scheme, &req, 1e-10).unwrap();
            let d = evaluate_distributed(&scheme, &req, &settings(50, 100)).unwrap();
            assert!((c.value - d.value).abs() < 1e-5, "{} vs {}", c.value, d.value);
            assert!(d.consensus_spread < 1e-8);
            assert_eq!(d.trace.len(), 50);
        }
    }
}

#[test]
fn decoupled_agents_solve_independently() {
    let scheme = decoupled_scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_state(&mut rng, 3);
    let a = random_action(&mut rng, 3);
    // each agent alone on a single-agent network
    let single = |i: usize, with_action: bool| {
        let topo = GraphTopology::with_communication(1, [], []).unwrap();
        let sc = MpcScheme::academic(SchemeConfig::default(), topo).unwrap();
        let si = JointState::new(vec![s.states[i].clone()]);
        let ai = vec![a[i].clone()];
        let req = if with_action { EvalRequest::q(&si, &ai) } else { EvalRequest::value(&si) };
        evaluate_centralized(&sc, &req, 1e-10).unwrap()
    };
    for iterations in [1, 3] {
        let d = evaluate_distributed(&scheme, &EvalRequest::q(&s, &a), &settings(iterations, 100)).unwrap();
        let sum: f64 = (0..3).map(|i| single(i, true).value).sum();
        assert!((d.value - sum).abs() < 1e-9);
        assert!(d.trace.iter().all(|r| r.primal == 0.0 && r.dual == 0.0));
        let d = evaluate_distributed(&scheme, &EvalRequest::value(&s), &settings(iterations, 100)).unwrap();
        for i in 0..3 {
            assert!((d.actions[i][0] - single(i, false).actions[0][0]).abs() < 1e-9);
        }
    }
}

#[test]
fn skipping_consensus_leaves_disagreement() {
    let scheme = chain_scheme();
    let s = random_state(&mut ChaCha8Rng::seed_from_u64(5), 3);
    let d = evaluate_distributed(&scheme, &EvalRequest::value(&s), &settings(50, 0)).unwrap();
    assert!(d.consensus_spread > 1e-6);
    let sum: f64 = d.local_values.iter().sum();
    assert!((d.value - sum).abs() < 1e-12);
}

#[test]
fn bellman_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (scheme, coupled) in [(chain_scheme(), false), (coupled_scheme(), true), (coupled_scheme(), true)] {
        let s = if coupled { interior_state(&mut rng, 3) } else { random_state(&mut rng, 3) };
        let v = evaluate_centralized(&scheme, &EvalRequest::value(&s), 1e-10).unwrap();
        let q = evaluate_centralized(&scheme, &EvalRequest::q(&s, &v.actions), 1e-10).unwrap();
        assert!((q.value - v.value).abs() < 1e-6);
        let vd = evaluate_distributed(&scheme, &EvalRequest::value(&s), &settings(50, 100)).unwrap();
        let qd = evaluate_distributed(&scheme, &EvalRequest::q(&s, &vd.actions), &settings(50, 100)).unwrap();
        assert!((qd.value - vd.value).abs() < 1e-4);
        for a in vd.actions.iter().chain(&v.actions) {
            assert!((-1.0..=1.0).contains(&a[0]));
        }
    }
}

#[test]
fn q_dominates_v_and_policy_minimises_q() {
    let scheme = chain_scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let s = random_state(&mut rng, 3);
        let v = evaluate_centralized(&scheme, &EvalRequest::value(&s), 1e-10).unwrap();
        let a = random_action(&mut rng, 3);
        let q = evaluate_centralized(&scheme, &EvalRequest::q(&s, &a), 1e-10).unwrap();
        assert!(q.value >= v.value - 1e-9);
        let perturbed: Vec<_> = v
            .actions
            .iter()
            .map(|u| DVector::from_element(1, (u[0] + rng.random_range(-0.2..0.2)).clamp(-1.0, 1.0)))
            .collect();
        let qp_ = evaluate_centralized(&scheme, &EvalRequest::q(&s, &perturbed), 1e-10).unwrap();
        let qpi = evaluate_centralized(&scheme, &EvalRequest::q(&s, &v.actions), 1e-10).unwrap();
        assert!(qpi.value <= qp_.value + 1e-9);
    }
}

#[test]
fn slack_weight_is_irrelevant_without_violations() {
    let mut scheme = chain_scheme();
    let s = JointState::new(vec![DVector::from_vec(vec![0.5, 0.1]); 3]);
    let base = evaluate_centralized(&scheme, &EvalRequest::value(&s), 1e-10).unwrap();
    assert!(base.agents.iter().all(|a| a.sigma.iter().all(|sg| sg.amax() < 1e-9)));
    scheme.config.omega *= 10.0;
    let heavier = evaluate_centralized(&scheme, &EvalRequest::value(&s), 1e-10).unwrap();
    assert!((base.value - heavier.value).abs() < 1e-9);
}

#[test]
fn local_program_ignores_non_neighbour_states() {
    // agent 0 only couples to agent 1: the state of agent 2 must not reach its subproblem
    let scheme = chain_scheme();
    let s1 = s_of(3);
    let mut s2 = s1.clone();
    s2.states[2] = DVector::from_vec(vec![0.9, -0.7]);
    s2.states[1] = DVector::from_vec(vec![0.1, 0.3]);
    let l1 = LocalQp::new(&scheme, 0, &EvalRequest::value(&s1), 0.5, 1e-10).unwrap();
    let l2 = LocalQp::new(&scheme, 0, &EvalRequest::value(&s2), 0.5, 1e-10).unwrap();
    let shift = DVector::from_fn(l1.shared_len(), |k, _| (k as f64 * 0.37).sin());
    let (x1, a1) = l1.solve(&shift).unwrap();
    let (x2, a2) = l2.solve(&shift).unwrap();
    assert_eq!(x1, x2);
    assert_eq!(a1, a2);
}

#[test]
fn more_admm_rounds_reduce_the_value_error() {
    let scheme = coupled_scheme();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = interior_state(&mut rng, 3);
    let a = random_action(&mut rng, 3);
    let req = EvalRequest::q(&s, &a);
    let c = evaluate_centralized(&scheme, &req, 1e-10).unwrap();
    let errors: Vec<f64> = [5, 10, 20, 50]
        .iter()
        .map(|&t| (evaluate_distributed(&scheme, &req, &settings(t, 100)).unwrap().value - c.value).abs())
        .collect();
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
}

#[test]
fn parallel_and_sequential_agree() {
    let scheme = chain_scheme();
    let s = s_of(3);
    let mut par = settings(20, 100);
    par.admm.execution = Execution::Parallel;
    let a = evaluate_distributed(&scheme, &EvalRequest::value(&s), &settings(20, 100)).unwrap();
    let b = evaluate_distributed(&scheme, &EvalRequest::value(&s), &par).unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.agents, b.agents);
}

#[test]
fn scheme_validation() {
    let topo = GraphTopology::chain(3).unwrap();
    let params = (0..3).map(|_| AgentParams::from_model(nominal_model(&[]))).collect();
    assert!(matches!(MpcScheme::new(SchemeConfig::default(), params, topo.clone()), Err(ApproxError::Dimension(_))));
    let bad = SchemeConfig { gamma: 0.0, ..SchemeConfig::default() };
    assert!(MpcScheme::academic(bad, topo.clone()).is_err());
    let bad = SchemeConfig { horizon: 0, ..SchemeConfig::default() };
    assert!(MpcScheme::academic(bad, topo).is_err());
}


#[test]
fn recovered_duals_converge_to_central() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scheme in [chain_scheme(), coupled_scheme()] {
        let s = interior_state(&mut rng, 3);
        let req = EvalRequest::value(&s);
        let central = evaluate_centralized(&scheme, &req, qp::TRAINING_TOL).unwrap();
        let mut errors = Vec::new();
        evaluate_distributed_observed(&scheme, &req, &settings(200, 0), |it, sols, _| {
            if [10, 50, 200].contains(&it) {
                errors.push(dual_error(&central.agents, sols));
            }
        })
        .unwrap();
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        assert!(errors[2] < 1e-5, "{errors:?}");
    }
}
