//! Comparison controllers and closed-loop rollouts on the benchmark plant.

mod ipm;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::approximator::{ApproxError, EvalRequest, MpcScheme, SchemeConfig};
use crate::learner::Evaluator;
use crate::linsys::{sample_inaccurate_model, sample_interval, true_dynamics, AcademicEnv, DynamicsParams, EnvConfig, JointState, LinsysError};
use crate::qp::QpError;
use crate::topology::GraphTopology;

pub use ipm::{SoftQp, SoftSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Plant(#[from] LinsysError),
    #[error("invalid baseline configuration: {0}")]
    Config(String),
}

pub trait Controller {
    fn name(&self) -> &str;
    fn act(&mut self, state: &JointState) -> Result<Vec<DVector<f64>>, BaselineError>;
}

/// Greedy policy of a (possibly learned) scheme.
#[derive(Clone, Debug)]
pub struct MpcPolicy {
    pub name: String,
    pub scheme: MpcScheme,
    pub evaluator: Evaluator,
}

impl MpcPolicy {
    /// The untrained scheme on the nominal model.
    pub fn nominal(config: SchemeConfig, topology: GraphTopology, evaluator: Evaluator) -> Result<Self, BaselineError> {
        Ok(Self { name: "nmpc".into(), scheme: MpcScheme::academic(config, topology)?, evaluator })
    }
}

impl Controller for MpcPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, state: &JointState) -> Result<Vec<DVector<f64>>, BaselineError> {
        Ok(self.evaluator.evaluate(&self.scheme, &EvalRequest::value(state))?.actions)
    }
}

/// Which models the scenarios are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioModel {
    /// Only the noise is uncertain.
    True,
    /// Models sampled from the uncertain family around the nominal model.
    Inexact,
}

/// Sampled models and noise sequences, indexed `[scenario][agent]` and `[scenario][agent][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub models: Vec<Vec<DynamicsParams>>,
    pub noise: Vec<Vec<Vec<f64>>>,
}

impl ScenarioSet {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        topology: &GraphTopology,
        count: usize,
        horizon: usize,
        model: ScenarioModel,
        noise: (f64, f64),
    ) -> Self {
        let big_m = topology.num_agents();
        let mut models = Vec::with_capacity(count);
        let mut seqs = Vec::with_capacity(count);
        for _ in 0..count {
            models.push(
                (0..big_m)
                    .map(|i| match model {
                        ScenarioModel::True => true_dynamics(topology.neighbors(i)),
                        ScenarioModel::Inexact => sample_inaccurate_model(rng, topology.neighbors(i)),
                    })
                    .collect(),
            );
            seqs.push((0..big_m).map(|_| (0..horizon).map(|_| sample_interval(rng, noise)).collect()).collect());
        }
        Self { models, noise: seqs }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Condensed scenario program: inputs of all agents shared across scenarios, one state
/// trajectory and slack sequence per scenario.
#[derive(Clone, Debug)]
pub struct ScenarioProgram {
    pub qp: SoftQp,
    /// Objective terms independent of the decision variables.
    pub constant: f64,
    pub num_agents: usize,
    pub scenarios: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
}

impl ScenarioProgram {
    /// Size of the equivalent uncondensed program (states, inputs and slacks).
    pub fn full_dimension(&self) -> usize {
        let per_scenario = self.num_agents * (2 * self.horizon + 1) * self.n;
        self.scenarios * per_scenario + self.qp.num_inputs()
    }

    /// Column of `u_i(k)` in the input vector.
    pub fn input_index(&self, agent: usize, k: usize) -> usize {
        (agent * self.horizon + k) * self.m
    }
}

/// `x(k) = offset + gain * U` for one agent at one step.
#[derive(Clone)]
struct Affine {
    offset: DVector<f64>,
    gain: DMatrix<f64>,
}

pub fn scenario_program(
    set: &ScenarioSet,
    config: &SchemeConfig,
    topology: &GraphTopology,
    state: &JointState,
) -> Result<ScenarioProgram, BaselineError> {
    let big_m = topology.num_agents();
    let (n, m, nh) = (config.s_lb.len(), config.u_lb.len(), config.horizon);
    if set.is_empty() {
        return Err(BaselineError::Config("at least one scenario is required".into()));
    }
    if state.num_agents() != big_m || state.states.iter().any(|s| s.len() != n) {
        return Err(ApproxError::Dimension("state does not match the scheme".into()).into());
    }
    for (models, noise) in set.models.iter().zip(&set.noise) {
        if models.len() != big_m || noise.len() != big_m || noise.iter().any(|e| e.len() < nh) {
            return Err(BaselineError::Config("scenario does not cover every agent and step".into()));
        }
        for (i, d) in models.iter().enumerate() {
            if d.n() != n || d.m() != m || d.neighbors() != topology.neighbors(i) {
                return Err(BaselineError::Config(format!("scenario model of agent {i} does not fit the network")));
            }
        }
    }
    let nu = big_m * nh * m;
    let ns = set.len() * big_m * nh * n;
    let weight = 1.0 / set.len() as f64;
    let mut q = DMatrix::zeros(nu, nu);
    let mut c = DVector::zeros(nu);
    let mut constant = 0.0;
    let mut slack_weight = DVector::zeros(ns);
    let slack_reg = DVector::from_element(ns, weight * config.slack_reg);
    let rows = 2 * ns + 2 * nu;
    let mut a = DMatrix::zeros(rows, nu);
    let mut b = DVector::zeros(rows);
    let mut slack_of_row = Vec::with_capacity(rows);
    let input = |i: usize, k: usize| (i * nh + k) * m;

    for (sc, (models, noise)) in set.models.iter().zip(&set.noise).enumerate() {
        let mut traj: Vec<Affine> = state
            .states
            .iter()
            .map(|s| Affine { offset: s.clone(), gain: DMatrix::zeros(n, nu) })
            .collect();
        for k in 0..nh {
            let disc = config.gamma.powi(k as i32);
            for i in 0..big_m {
                let x = &traj[i];
                q += x.gain.tr_mul(&x.gain) * (weight * disc);
                c += x.gain.tr_mul(&x.offset) * (weight * disc);
                constant += 0.5 * weight * disc * x.offset.norm_squared();
                for r in 0..n {
                    let j = ((sc * big_m + i) * nh + k) * n + r;
                    slack_weight[j] = weight * 0.5 * disc * config.omega[r];
                    let row = slack_of_row.len();
                    a.row_mut(row).copy_from(&(-x.gain.row(r)));
                    b[row] = x.offset[r] - config.s_lb[r];
                    slack_of_row.push(Some(j));
                    a.row_mut(row + 1).copy_from(&x.gain.row(r));
                    b[row + 1] = config.s_ub[r] - x.offset[r];
                    slack_of_row.push(Some(j));
                }
            }
            let next: Vec<Affine> = (0..big_m)
                .map(|i| {
                    let d = &models[i];
                    let mut offset = &d.a * &traj[i].offset + &d.offset;
                    offset[0] += noise[i][k];
                    let mut gain = &d.a * &traj[i].gain;
                    for (&j, aij) in &d.a_neighbors {
                        offset += aij * &traj[j].offset;
                        gain += aij * &traj[j].gain;
                    }
                    let mut cols = gain.columns_mut(input(i, k), m);
                    cols += &d.b;
                    Affine { offset, gain }
                })
                .collect();
            traj = next;
        }
        if let Some(pw) = &config.terminal_weight {
            for x in &traj {
                let pg = pw * &x.gain;
                q += x.gain.tr_mul(&pg) * weight;
                c += pg.tr_mul(&x.offset) * weight;
                constant += 0.5 * weight * x.offset.dot(&(pw * &x.offset));
            }
        }
    }
    for i in 0..big_m {
        for k in 0..nh {
            let disc = config.gamma.powi(k as i32);
            for r in 0..m {
                let col = input(i, k) + r;
                q[(col, col)] += 0.5 * disc;
                let row = slack_of_row.len();
                a[(row, col)] = 1.0;
                b[row] = config.u_ub[r];
                a[(row + 1, col)] = -1.0;
                b[row + 1] = -config.u_lb[r];
                slack_of_row.extend([None, None]);
            }
        }
    }
    Ok(ScenarioProgram {
        qp: SoftQp { q, c, slack_weight, slack_reg, a, b, slack_of_row },
        constant,
        num_agents: big_m,
        scenarios: set.len(),
        horizon: nh,
        n,
        m,
    })
}

/// First inputs of the scenario program and its optimal value.
pub fn scenario_mpc_policy(
    set: &ScenarioSet,
    config: &SchemeConfig,
    topology: &GraphTopology,
    state: &JointState,
    tol: f64,
) -> Result<(Vec<DVector<f64>>, f64), BaselineError> {
    let program = scenario_program(set, config, topology, state)?;
    let sol = program.qp.solve(tol)?;
    let actions = (0..program.num_agents)
        .map(|i| {
            let at = program.input_index(i, 0);
            DVector::from_fn(program.m, |r, _| sol.u[at + r].clamp(config.u_lb[r], config.u_ub[r]))
        })
        .collect();
    Ok((actions, sol.objective + program.constant))
}

/// Scenario MPC that redraws its scenarios at every call.
#[derive(Clone, Debug)]
pub struct ScenarioMpc {
    pub name: String,
    pub config: SchemeConfig,
    pub topology: GraphTopology,
    pub count: usize,
    pub model: ScenarioModel,
    pub noise: (f64, f64),
    pub tol: f64,
    rng: ChaCha8Rng,
}

impl ScenarioMpc {
    pub fn new(
        config: SchemeConfig,
        topology: GraphTopology,
        count: usize,
        model: ScenarioModel,
        noise: (f64, f64),
        seed: u64,
    ) -> Result<Self, BaselineError> {
        if count == 0 {
            return Err(BaselineError::Config("scenario count must be positive".into()));
        }
        let name = match model {
            ScenarioModel::True => "smpc_true",
            ScenarioModel::Inexact => "smpc_inexact",
        };
        Ok(Self { name: name.into(), config, topology, count, model, noise, tol: 1e-9, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

impl Controller for ScenarioMpc {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, state: &JointState) -> Result<Vec<DVector<f64>>, BaselineError> {
        let set = ScenarioSet::sample(&mut self.rng, &self.topology, self.count, self.config.horizon, self.model, self.noise);
        Ok(scenario_mpc_policy(&set, &self.config, &self.topology, state, self.tol)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    /// `sum_t sum_i L_i(s_t, a_t)` over the episode.
    pub cost: f64,
    /// Number of `(t, agent)` pairs whose state leaves the box by more than 1e-9.
    pub violations: usize,
}

/// Roll `controller` out on the true plant for `steps` transitions per seed.
/// Where evaluation episodes start.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Fixed(JointState),
    /// Drawn uniformly over the state box from the episode's seed.
    Uniform,
}

pub fn closed_loop_eval(
    controller: &mut dyn Controller,
    topology: &GraphTopology,
    env_config: &EnvConfig,
    initial: &InitialState,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<EpisodeOutcome>, BaselineError> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut env = AcademicEnv::new(topology, env_config.clone(), seed);
        let mut state = match initial {
            InitialState::Fixed(s) => s.clone(),
            InitialState::Uniform => env.random_state(),
        };
        let (mut cost, mut violations) = (0.0, 0);
        for _ in 0..steps {
            violations += state.states.iter().filter(|s| env_config.violates(s, 1e-9)).count();
            let actions = controller.act(&state)?;
            let (next, costs) = env.step(&state, &actions)?;
            cost += costs.iter().sum::<f64>();
            state = next;
        }
        out.push(EpisodeOutcome { seed, cost, violations });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
