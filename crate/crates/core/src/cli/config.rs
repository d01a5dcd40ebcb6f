//! Run configuration: one TOML file, every section optional, defaults reproduce the
//! three-agent academic benchmark.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;

use crate::approximator::{EvalSettings, SchemeConfig};
use crate::consensus::AdmmSettings;
use crate::exec::Execution;
use crate::learner::{Evaluator, LearnerConfig};
use crate::linsys::{EnvConfig, JointState};
use crate::qp::TRAINING_TOL;
use crate::topology::GraphTopology;

use super::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologySpec,
    pub environment: EnvironmentSpec,
    pub scheme: SchemeSpec,
    pub learner: LearnerSpec,
    pub distributed: DistributedSpec,
    pub dual_check: DualCheckSpec,
    pub compare: CompareSpec,
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySpec {
    pub agents: usize,
    /// Directed coupling edges `[i, j]` (`i` affects `j`); a chain when absent.
    pub edges: Option<Vec<[usize; 2]>>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self { agents: 3, edges: None }
    }
}

/// A state for every agent, or one state shared by all.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum StateSpec {
    Shared(Vec<f64>),
    PerAgent(Vec<Vec<f64>>),
}

impl StateSpec {
    fn resolve(&self, agents: usize, n: usize, path: &str) -> Result<JointState, CliError> {
        let states: Vec<Vec<f64>> = match self {
            StateSpec::Shared(s) => vec![s.clone(); agents],
            StateSpec::PerAgent(all) => all.clone(),
        };
        if states.len() != agents {
            return Err(CliError::config(path, format!("expected {agents} agent states, got {}", states.len())));
        }
        if let Some(bad) = states.iter().find(|s| s.len() != n || s.iter().any(|v| !v.is_finite())) {
            return Err(CliError::config(path, format!("each state needs {n} finite components, got {bad:?}")));
        }
        Ok(JointState::new(states.into_iter().map(DVector::from_vec).collect()))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub s_lb: Vec<f64>,
    pub s_ub: Vec<f64>,
    pub omega: Vec<f64>,
    pub noise: [f64; 2],
    pub seed: u64,
    pub initial_state: StateSpec,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            s_lb: vec![0.0, -1.0],
            s_ub: vec![1.0, 1.0],
            omega: vec![100.0, 100.0],
            noise: [-0.1, 0.0],
            seed: 1,
            initial_state: StateSpec::Shared(vec![0.5, 0.0]),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSpec {
    pub horizon: usize,
    pub gamma: f64,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    pub slack_reg: f64,
    pub discount_linear: bool,
    /// Parameters to start from (`agent,name,value` rows); the nominal model when absent.
    pub theta_file: Option<PathBuf>,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        Self { horizon: 10, gamma: 0.9, u_lb: vec![-1.0], u_ub: vec![1.0], slack_reg: 1e-6, discount_linear: false, theta_file: None }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Distributed,
    Centralized,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSpec {
    pub steps: usize,
    pub alpha0: f64,
    pub alpha_decay: f64,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    pub perturbation: [f64; 2],
    pub replay_window: usize,
    pub update_period: usize,
    pub gamma: f64,
    pub max_update_norm: Option<f64>,
    pub snapshot_every: usize,
    pub evaluator: EvaluatorKind,
    pub seed: u64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        let d = LearnerConfig::default();
        Self {
            steps: 5000,
            alpha0: d.alpha0,
            alpha_decay: d.alpha_decay,
            epsilon0: d.epsilon0,
            epsilon_decay: d.epsilon_decay,
            perturbation: [d.perturbation.0, d.perturbation.1],
            replay_window: d.replay_window,
            update_period: d.update_period,
            gamma: d.gamma,
            max_update_norm: None,
            snapshot_every: d.snapshot_every,
            evaluator: EvaluatorKind::Distributed,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionKind {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributedSpec {
    pub rho: f64,
    pub admm_iterations: usize,
    pub gac_rounds: usize,
    pub tol: f64,
    pub execution: ExecutionKind,
}

impl Default for DistributedSpec {
    fn default() -> Self {
        let d = AdmmSettings::default();
        Self { rho: d.rho, admm_iterations: d.iterations, gac_rounds: 100, tol: TRAINING_TOL, execution: ExecutionKind::Parallel }
    }
}

pub const DUAL_CHECK_TAUS: [usize; 10] = [1, 2, 5, 10, 20, 30, 40, 50, 70, 100];

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualCheckSpec {
    /// Defaults to `environment.initial_state`.
    pub state: Option<StateSpec>,
    pub taus: Vec<usize>,
}

impl Default for DualCheckSpec {
    fn default() -> Self {
        Self { state: None, taus: DUAL_CHECK_TAUS.to_vec() }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum InitialSpec {
    /// `"uniform"`: fresh start over the state box for every episode.
    Named(String),
    Fixed(StateSpec),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub episodes: usize,
    pub steps: usize,
    /// Episode `e` uses seed `seed + e`.
    pub seed: u64,
    pub initial: InitialSpec,
    pub scenarios: usize,
    pub scenario_seed: u64,
    /// Trained parameters; the policy is trained first (with `learner`) when absent.
    pub theta_file: Option<PathBuf>,
    /// Also evaluate the parameters recorded at these training steps.
    pub snapshots: Vec<usize>,
    pub include_smpc: bool,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            episodes: 20,
            steps: 100,
            seed: 100,
            initial: InitialSpec::Named("uniform".into()),
            scenarios: 25,
            scenario_seed: 7,
            theta_file: None,
            snapshots: Vec::new(),
            include_smpc: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), plots: true }
    }
}

fn check(ok: bool, path: &str, message: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(path, message.to_string()))
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse(reason) => CliError::ConfigFile { path: path.to_path_buf(), reason },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Field-level checks with key paths, then the module validators.
    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.topology;
        check(t.agents >= 1, "topology.agents", "at least one agent is required")?;
        let e = &self.environment;
        let n = e.s_lb.len();
        check(n >= 1 && finite(&e.s_lb), "environment.s_lb", "must be a nonempty finite vector")?;
        check(e.s_ub.len() == n && finite(&e.s_ub), "environment.s_ub", "must match environment.s_lb")?;
        check(e.s_lb.iter().zip(&e.s_ub).all(|(l, u)| l <= u), "environment.s_ub", "must not be below environment.s_lb")?;
        check(e.omega.len() == n && e.omega.iter().all(|w| *w >= 0.0 && w.is_finite()), "environment.omega", "must be nonnegative, one weight per state")?;
        check(finite(&e.noise) && e.noise[0] <= e.noise[1], "environment.noise", "must be an ordered finite interval")?;
        e.initial_state.resolve(t.agents, n, "environment.initial_state")?;

        let s = &self.scheme;
        check(s.horizon >= 1, "scheme.horizon", "must be positive")?;
        check(s.gamma > 0.0 && s.gamma <= 1.0, "scheme.gamma", "must lie in (0, 1]")?;
        check(!s.u_lb.is_empty() && finite(&s.u_lb), "scheme.u_lb", "must be a nonempty finite vector")?;
        check(s.u_ub.len() == s.u_lb.len() && s.u_lb.iter().zip(&s.u_ub).all(|(l, u)| l <= u), "scheme.u_ub", "must match scheme.u_lb and not lie below it")?;
        check(s.slack_reg > 0.0 && s.slack_reg.is_finite(), "scheme.slack_reg", "must be positive")?;

        let l = &self.learner;
        check(l.alpha0 >= 0.0 && l.alpha0.is_finite(), "learner.alpha0", "must be finite and nonnegative")?;
        check(l.alpha_decay > 0.0 && l.alpha_decay <= 1.0, "learner.alpha_decay", "must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&l.epsilon0), "learner.epsilon0", "must lie in [0, 1]")?;
        check(l.epsilon_decay > 0.0 && l.epsilon_decay <= 1.0, "learner.epsilon_decay", "must lie in (0, 1]")?;
        check(finite(&l.perturbation) && l.perturbation[0] <= l.perturbation[1], "learner.perturbation", "must be an ordered finite interval")?;
        check(l.replay_window >= 1, "learner.replay_window", "must be positive")?;
        check(l.update_period >= 1, "learner.update_period", "must be positive")?;
        check(l.gamma > 0.0 && l.gamma <= 1.0, "learner.gamma", "must lie in (0, 1]")?;
        check(l.max_update_norm.is_none_or(|c| c > 0.0), "learner.max_update_norm", "must be positive")?;

        let d = &self.distributed;
        check(d.rho > 0.0 && d.rho.is_finite(), "distributed.rho", "must be positive")?;
        check(d.admm_iterations >= 1, "distributed.admm_iterations", "must be positive")?;
        check(d.tol > 0.0, "distributed.tol", "must be positive")?;

        let dc = &self.dual_check;
        check(!dc.taus.is_empty() && dc.taus.iter().all(|&t| t >= 1), "dual_check.taus", "must list positive iteration counts")?;
        if let Some(state) = &dc.state {
            state.resolve(t.agents, n, "dual_check.state")?;
        }

        let c = &self.compare;
        check(c.episodes >= 1, "compare.episodes", "must be positive")?;
        check(c.steps >= 1, "compare.steps", "must be positive")?;
        check(c.scenarios >= 1, "compare.scenarios", "must be positive")?;
        match &c.initial {
            InitialSpec::Named(name) => check(name == "uniform", "compare.initial", "must be \"uniform\" or a state")?,
            InitialSpec::Fixed(state) => {
                state.resolve(t.agents, n, "compare.initial")?;
            }
        }
        if !c.snapshots.is_empty() {
            check(
                l.snapshot_every > 0 && c.snapshots.iter().all(|s| s % l.snapshot_every == 0 && *s <= l.steps),
                "compare.snapshots",
                "must be multiples of learner.snapshot_every within learner.steps",
            )?;
        }

        self.topology_graph()?;
        let scheme = crate::approximator::MpcScheme::academic(self.scheme_config(), self.topology_graph()?);
        scheme.map_err(|e| CliError::config("scheme", e.to_string()))?;
        self.learner_config().validate().map_err(|e| CliError::config("learner", e.to_string()))?;
        Ok(())
    }

    pub fn topology_graph(&self) -> Result<GraphTopology, CliError> {
        let t = &self.topology;
        let graph = match &t.edges {
            None => GraphTopology::chain(t.agents),
            Some(edges) => GraphTopology::new(t.agents, edges.iter().map(|[i, j]| (*i, *j))),
        };
        graph.map_err(|e| CliError::config("topology.edges", e.to_string()))
    }

    pub fn env_config(&self) -> EnvConfig {
        let e = &self.environment;
        EnvConfig {
            s_lb: DVector::from_vec(e.s_lb.clone()),
            s_ub: DVector::from_vec(e.s_ub.clone()),
            omega: DVector::from_vec(e.omega.clone()),
            noise: (e.noise[0], e.noise[1]),
        }
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        let (e, s) = (&self.environment, &self.scheme);
        SchemeConfig {
            horizon: s.horizon,
            gamma: s.gamma,
            omega: DVector::from_vec(e.omega.clone()),
            s_lb: DVector::from_vec(e.s_lb.clone()),
            s_ub: DVector::from_vec(e.s_ub.clone()),
            u_lb: DVector::from_vec(s.u_lb.clone()),
            u_ub: DVector::from_vec(s.u_ub.clone()),
            slack_reg: s.slack_reg,
            discount_linear: s.discount_linear,
            terminal_weight: None,
        }
    }

    pub fn execution(&self) -> Execution {
        match self.distributed.execution {
            ExecutionKind::Parallel => Execution::Parallel,
            ExecutionKind::Sequential => Execution::Sequential,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let d = &self.distributed;
        EvalSettings {
            admm: AdmmSettings { rho: d.rho, iterations: d.admm_iterations, execution: self.execution() },
            gac_rounds: d.gac_rounds,
            tol: d.tol,
        }
    }

    pub fn evaluator(&self) -> Evaluator {
        match self.learner.evaluator {
            EvaluatorKind::Distributed => Evaluator::Distributed(self.eval_settings()),
            EvaluatorKind::Centralized => Evaluator::Centralized { tol: self.distributed.tol },
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        let l = &self.learner;
        LearnerConfig {
            alpha0: l.alpha0,
            alpha_decay: l.alpha_decay,
            epsilon0: l.epsilon0,
            epsilon_decay: l.epsilon_decay,
            perturbation: (l.perturbation[0], l.perturbation[1]),
            replay_window: l.replay_window,
            update_period: l.update_period,
            gamma: l.gamma,
            max_update_norm: l.max_update_norm,
            snapshot_every: l.snapshot_every,
            evaluator: self.evaluator(),
            seed: l.seed,
        }
    }

    pub fn initial_state(&self) -> JointState {
        self.environment
            .initial_state
            .resolve(self.topology.agents, self.environment.s_lb.len(), "environment.initial_state")
            .expect("validated")
    }

    pub fn dual_check_state(&self) -> JointState {
        match &self.dual_check.state {
            Some(s) => s.resolve(self.topology.agents, self.environment.s_lb.len(), "dual_check.state").expect("validated"),
            None => self.initial_state(),
        }
    }

    pub fn compare_initial(&self) -> crate::baselines::InitialState {
        match &self.compare.initial {
            InitialSpec::Named(_) => crate::baselines::InitialState::Uniform,
            InitialSpec::Fixed(s) => crate::baselines::InitialState::Fixed(
                s.resolve(self.topology.agents, self.environment.s_lb.len(), "compare.initial").expect("validated"),
            ),
        }
    }

    /// Point every random stream at `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.environment.seed = seed;
        self.learner.seed = seed;
        self.compare.seed = seed;
        self.compare.scenario_seed = seed;
    }
}
