//! Parametrised distributed MPC scheme used as Q/V function approximator and policy.
//!
//! Per agent the decision variables are `x(0..N)`, `u(0..N-1)`, `sigma(0..N-1)` and the
//! cost is
//!
//! ```text
//! V0 + sum_k f'[x(k); u(k)] + 1/2 g^k (|x(k)|^2 + 1/2 |u(k)|^2 + w' sigma(k)) + eps |sigma(k)|^2
//! ```
//!
//! subject to `x(0) = s`, optionally `u(0) = a`, the learnable affine dynamics, soft state
//! bounds with slack `sigma >= 0` and hard input bounds.

mod build;
mod evaluate;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::consensus::{AdmmSettings, ConsensusError, ResidualRecord};
use crate::linsys::{nominal_model, AgentParams, JointState};
use crate::qp::{QpError, TRAINING_TOL};
use crate::topology::GraphTopology;

pub use build::{central_qp, AgentRows, LocalQp};
pub use evaluate::{dual_error, evaluate_centralized, evaluate_distributed, evaluate_distributed_observed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApproxError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("action {value} of agent {agent} is outside the input bounds")]
    ActionOutOfBounds { agent: usize, value: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub omega: DVector<f64>,
    pub s_lb: DVector<f64>,
    pub s_ub: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    /// Weight of the `|sigma|^2` regulariser that keeps the QP strictly convex.
    pub slack_reg: f64,
    /// Apply `g^k` to the linear cost term as well.
    pub discount_linear: bool,
    /// Optional terminal cost `1/2 x(N)' P x(N)`.
    pub terminal_weight: Option<DMatrix<f64>>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            gamma: 0.9,
            omega: DVector::from_vec(vec![100.0, 100.0]),
            s_lb: DVector::from_vec(vec![0.0, -1.0]),
            s_ub: DVector::from_vec(vec![1.0, 1.0]),
            u_lb: DVector::from_element(1, -1.0),
            u_ub: DVector::from_element(1, 1.0),
            slack_reg: 1e-6,
            discount_linear: false,
            terminal_weight: None,
        }
    }
}

/// The learnable scheme: shared hyperparameters, per-agent parameters and the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcScheme {
    pub config: SchemeConfig,
    pub params: Vec<AgentParams>,
    pub topology: GraphTopology,
}

impl MpcScheme {
    pub fn new(config: SchemeConfig, params: Vec<AgentParams>, topology: GraphTopology) -> Result<Self, ApproxError> {
        let scheme = Self { config, params, topology };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Benchmark scheme: nominal model of the uncertain family, all offsets zero.
    pub fn academic(config: SchemeConfig, topology: GraphTopology) -> Result<Self, ApproxError> {
        let params = (0..topology.num_agents())
            .map(|i| AgentParams::from_model(nominal_model(topology.neighbors(i))))
            .collect();
        Self::new(config, params, topology)
    }

    pub fn num_agents(&self) -> usize {
        self.params.len()
    }

    pub fn n(&self) -> usize {
        self.config.s_lb.len()
    }

    pub fn m(&self) -> usize {
        self.config.u_lb.len()
    }

    pub fn validate(&self) -> Result<(), ApproxError> {
        let c = &self.config;
        let (n, m) = (self.n(), self.m());
        let dim = |what: &str| Err(ApproxError::Dimension(what.to_string()));
        if c.horizon == 0 {
            return dim("horizon must be positive");
        }
        if !(c.gamma > 0.0 && c.gamma <= 1.0) {
            return dim("discount must lie in (0, 1]");
        }
        if c.s_ub.len() != n || c.omega.len() != n || c.u_ub.len() != m {
            return dim("bound and slack weight lengths disagree");
        }
        if !(c.slack_reg > 0.0) {
            return dim("slack regulariser must be positive");
        }
        if let Some(p) = &c.terminal_weight {
            if p.shape() != (n, n) {
                return dim("terminal weight must be n x n");
            }
        }
        if self.params.len() != self.topology.num_agents() {
            return Err(ApproxError::Dimension(format!(
                "{} parameter sets for {} agents",
                self.params.len(),
                self.topology.num_agents()
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            if p.n() != n || p.m() != m || p.x_lb.len() != n || p.x_ub.len() != n || p.f.len() != n + m {
                return Err(ApproxError::Dimension(format!("parameters of agent {i} do not match n={n}, m={m}")));
            }
            if p.dynamics.neighbors() != self.topology.neighbors(i) {
                return Err(ApproxError::Dimension(format!(
                    "agent {i} has coupling matrices for {:?}, neighbourhood is {:?}",
                    p.dynamics.neighbors(),
                    self.topology.neighbors(i)
                )));
            }
        }
        Ok(())
    }

    pub fn thetas(&self) -> Vec<DVector<f64>> {
        self.params.iter().map(AgentParams::flatten).collect()
    }

    pub fn set_thetas(&mut self, thetas: &[DVector<f64>]) -> Result<(), ApproxError> {
        if thetas.len() != self.params.len() {
            return Err(ApproxError::Dimension("one parameter vector per agent expected".into()));
        }
        for (p, t) in self.params.iter_mut().zip(thetas) {
            p.assign(t).map_err(|e| ApproxError::Dimension(e.to_string()))?;
        }
        Ok(())
    }

    /// Local objective of agent `i` at a solution (exploration tilt excluded).
    pub fn local_cost(&self, i: usize, sol: &AgentSolution) -> f64 {
        let c = &self.config;
        let p = &self.params[i];
        let n = self.n();
        let mut cost = p.v0;
        for k in 0..c.horizon {
            let disc = c.gamma.powi(k as i32);
            let lin_scale = if c.discount_linear { disc } else { 1.0 };
            let xu_dot = p.f.rows(0, n).dot(&sol.x[k]) + p.f.rows(n, self.m()).dot(&sol.u[k]);
            cost += lin_scale * xu_dot;
            cost += 0.5 * disc * (sol.x[k].norm_squared() + 0.5 * sol.u[k].norm_squared() + c.omega.dot(&sol.sigma[k]));
            cost += c.slack_reg * sol.sigma[k].norm_squared();
        }
        if let Some(pw) = &c.terminal_weight {
            let xn = &sol.x[c.horizon];
            cost += 0.5 * xn.dot(&(pw * xn));
        }
        cost
    }
}

/// What to evaluate: `V(s)` and the policy when `action` is `None`, otherwise `Q(s, a)`.
/// `tilt` adds a linear term on each agent's first input.
#[derive(Clone, Copy, Debug)]
pub struct EvalRequest<'a> {
    pub state: &'a JointState,
    pub action: Option<&'a [DVector<f64>]>,
    pub tilt: Option<&'a [DVector<f64>]>,
}

impl<'a> EvalRequest<'a> {
    pub fn value(state: &'a JointState) -> Self {
        Self { state, action: None, tilt: None }
    }

    pub fn q(state: &'a JointState, action: &'a [DVector<f64>]) -> Self {
        Self { state, action: Some(action), tilt: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub admm: AdmmSettings,
    pub gac_rounds: usize,
    pub tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { admm: AdmmSettings::default(), gac_rounds: 100, tol: TRAINING_TOL }
    }
}

/// One agent's primal-dual solution in the agent's own row and variable layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSolution {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
    /// The agent's view of its neighbours' states `x_j(0..N-1)`.
    pub neighbor_x: Vec<(usize, Vec<DVector<f64>>)>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub kkt_residual: f64,
    pub degenerate: usize,
}

#[derive(Clone, Debug)]
pub struct EvaluationResult {
    /// `sum_i F_i*`, for the distributed evaluation the mean of the agents' estimates.
    pub value: f64,
    pub local_values: Vec<f64>,
    /// Each agent's estimate of the value after global average consensus.
    pub estimates: Vec<f64>,
    /// First inputs clipped to the input box.
    pub actions: Vec<DVector<f64>>,
    pub agents: Vec<AgentSolution>,
    pub trace: Vec<ResidualRecord>,
    /// `max - min` of the estimates.
    pub consensus_spread: f64,
}

#[cfg(test)]
mod tests;
