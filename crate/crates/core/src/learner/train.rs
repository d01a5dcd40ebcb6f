use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lagrangian_gradient, local_update, td_error, Experience, LearnerConfig, LearnerError, ReplayBuffer};
use crate::approximator::{
    evaluate_centralized, evaluate_distributed, ApproxError, EvalRequest, EvalSettings, EvaluationResult, MpcScheme,
};
use crate::linsys::{sample_interval, AcademicEnv, JointState};

/// How the network evaluates `Q`, `V` and the policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Evaluator {
    /// One monolithic solve (reference learner).
    Centralized { tol: f64 },
    Distributed(EvalSettings),
}

impl Evaluator {
    pub fn evaluate(&self, scheme: &MpcScheme, req: &EvalRequest) -> Result<EvaluationResult, ApproxError> {
        match self {
            Evaluator::Centralized { tol } => evaluate_centralized(scheme, req, *tol),
            Evaluator::Distributed(s) => evaluate_distributed(scheme, req, s),
        }
    }

    /// Each agent's estimate of `sum_i values[i]`.
    pub fn agree(&self, scheme: &MpcScheme, values: &[f64]) -> Result<Vec<f64>, ApproxError> {
        match self {
            Evaluator::Centralized { .. } => Ok(vec![values.iter().sum(); values.len()]),
            Evaluator::Distributed(s) => {
                let big_m = values.len() as f64;
                let initial = DVector::from_iterator(values.len(), values.iter().map(|v| v * big_m));
                let est = scheme
                    .topology
                    .gac_consensus(&initial, s.gac_rounds)
                    .map_err(|e| ApproxError::Dimension(e.to_string()))?;
                Ok(est.iter().copied().collect())
            }
        }
    }
}

/// The action actually applied and how it was obtained.
#[derive(Clone, Debug)]
pub struct Exploration {
    pub result: EvaluationResult,
    pub tilt: Option<Vec<DVector<f64>>>,
    pub explored: Vec<bool>,
}

fn draw_tilt<R: Rng + ?Sized>(
    scheme: &MpcScheme,
    epsilon: f64,
    interval: (f64, f64),
    rng: &mut R,
) -> (Option<Vec<DVector<f64>>>, Vec<bool>) {
    let m = scheme.m();
    let mut explored = Vec::with_capacity(scheme.num_agents());
    let tilt: Vec<DVector<f64>> = (0..scheme.num_agents())
        .map(|_| {
            let go = rng.random::<f64>() < epsilon;
            explored.push(go);
            if go {
                DVector::from_fn(m, |_, _| sample_interval(rng, interval))
            } else {
                DVector::zeros(m)
            }
        })
        .collect();
    let any = explored.iter().any(|&e| e);
    (any.then_some(tilt), explored)
}

/// Epsilon-greedy policy: each agent independently tilts its first-input cost with
/// probability `epsilon`, then the network solves the (possibly tilted) policy program once.
pub fn explore_action<R: Rng + ?Sized>(
    scheme: &MpcScheme,
    evaluator: &Evaluator,
    state: &JointState,
    epsilon: f64,
    interval: (f64, f64),
    rng: &mut R,
) -> Result<Exploration, ApproxError> {
    let (tilt, explored) = draw_tilt(scheme, epsilon, interval, rng);
    let req = EvalRequest { state, action: None, tilt: tilt.as_deref() };
    let result = evaluator.evaluate(scheme, &req)?;
    Ok(Exploration { result, tilt, explored })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    /// Network average of the agents' TD estimates.
    pub td_error: f64,
    pub q_value: f64,
    pub v_next: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub explored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSnapshot {
    pub step: usize,
    pub thetas: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<ThetaSnapshot>,
    pub updates: usize,
}

impl TrainingLog {
    /// Mean `|delta|` over `records[range]`.
    pub fn mean_abs_td(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.td_error.abs()).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Run `steps` transitions on `env` from `initial`, updating `scheme` in place.
pub fn train(
    env: &mut AcademicEnv,
    scheme: &mut MpcScheme,
    initial: JointState,
    config: &LearnerConfig,
    steps: usize,
) -> Result<TrainingLog, LearnerError> {
    config.validate()?;
    scheme.validate()?;
    let big_m = scheme.num_agents();
    let ev = config.evaluator;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buffer = ReplayBuffer::new(config.replay_window);
    let mut log = TrainingLog::default();
    let mut state = initial;
    // Greedy evaluation at `state` under the current parameters, if already known.
    let mut greedy: Option<EvaluationResult> = None;
    if config.snapshot_every > 0 {
        log.snapshots.push(ThetaSnapshot { step: 0, thetas: scheme.thetas() });
    }

    for t in 0..steps {
        let at = |source: ApproxError| LearnerError::Step { step: t, source };
        let (alpha, epsilon) = (config.alpha(t), config.epsilon(t));
        let (tilt, explored) = draw_tilt(scheme, epsilon, config.perturbation, &mut rng);
        let policy = match (tilt.is_some(), greedy.take()) {
            (false, Some(cached)) => cached,
            _ => ev
                .evaluate(scheme, &EvalRequest { state: &state, action: None, tilt: tilt.as_deref() })
                .map_err(at)?,
        };
        let actions = policy.actions;
        let (next, costs) = env
            .step(&state, &actions)
            .map_err(|e| at(ApproxError::Dimension(e.to_string())))?;
        let q = ev.evaluate(scheme, &EvalRequest::q(&state, &actions)).map_err(at)?;
        let v_next = ev.evaluate(scheme, &EvalRequest::value(&next)).map_err(at)?;
        let cost_est = ev.agree(scheme, &costs).map_err(at)?;
        let td_errors: Vec<f64> = (0..big_m)
            .map(|i| td_error(cost_est[i], v_next.estimates[i], q.estimates[i], config.gamma))
            .collect();
        let gradients = (0..big_m)
            .map(|i| lagrangian_gradient(scheme, i, &q.agents[i]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                LearnerError::Approx(source) => at(source),
                other => other,
            })?;
        let experience = Experience { step: t, td_errors, gradients };
        log.records.push(StepRecord {
            step: t,
            state: state.states.clone(),
            actions: actions.clone(),
            costs,
            td_error: experience.td_error(),
            q_value: q.value,
            v_next: v_next.value,
            alpha,
            epsilon,
            explored: explored.iter().any(|&e| e),
        });
        buffer.push(experience);

        let mut changed = false;
        if (t + 1) % config.update_period == 0 {
            let mut thetas = scheme.thetas();
            for (i, theta) in thetas.iter_mut().enumerate() {
                let (delta, grad) = buffer.averages(i).expect("buffer holds the current experience");
                let mut updated = local_update(theta, delta, &grad, alpha);
                if let Some(limit) = config.max_update_norm {
                    let norm = (&updated - &*theta).norm();
                    if norm > limit {
                        updated = &*theta + (&updated - &*theta) * (limit / norm);
                    }
                }
                changed |= updated != *theta;
                *theta = updated;
            }
            scheme.set_thetas(&thetas).map_err(at)?;
            log.updates += 1;
        }
        if !changed {
            greedy = Some(v_next);
        }
        state = next;
        if config.snapshot_every > 0 && (t + 1) % config.snapshot_every == 0 {
            log.snapshots.push(ThetaSnapshot { step: t + 1, thetas: scheme.thetas() });
        }
    }
    Ok(log)
}
