//! Q-learning of the scheme parameters from Lagrangian sensitivities.
//!
//! Each agent updates only its own parameter vector, using its own primal-dual solution of
//! the `Q(s, a)` program and its own estimate of the TD error.

mod gradient;
mod train;

use std::collections::VecDeque;

use nalgebra::DVector;
use thiserror::Error;

use crate::approximator::{ApproxError, EvalSettings};
use crate::qp::TRAINING_TOL;

pub use gradient::{data_difference_gradient, finite_difference_gradient, lagrangian_gradient, FiniteDifference};
pub use train::{
    explore_action, train, Evaluator, Exploration, StepRecord, ThetaSnapshot, TrainingLog,
};

/// Largest KKT residual accepted for a sensitivity.
pub const STALE_DUAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error("duals of agent {agent} are stale: KKT residual {residual:e}")]
    StaleDuals { agent: usize, residual: f64 },
    #[error("step {step}: {source}")]
    Step { step: usize, source: ApproxError },
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub alpha0: f64,
    pub alpha_decay: f64,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    /// Range of the uniform tilt added to an exploring agent's first-input cost.
    pub perturbation: (f64, f64),
    pub replay_window: usize,
    pub update_period: usize,
    pub gamma: f64,
    /// Per-agent bound on the norm of one parameter step.
    pub max_update_norm: Option<f64>,
    /// Record the parameters every this many steps (0 disables snapshots).
    pub snapshot_every: usize,
    pub evaluator: Evaluator,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            alpha0: 6e-5,
            alpha_decay: 0.9996,
            epsilon0: 0.7,
            epsilon_decay: 0.99,
            perturbation: (-1.0, 1.0),
            replay_window: 15,
            update_period: 2,
            gamma: 0.9,
            max_update_norm: None,
            snapshot_every: 10,
            evaluator: Evaluator::Distributed(EvalSettings::default()),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |what: &str| Err(LearnerError::Config(what.to_string()));
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) || !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("decay rates must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon0) {
            return bad("exploration probability must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        let (lo, hi) = self.perturbation;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("perturbation interval must be finite and ordered");
        }
        if self.replay_window == 0 || self.update_period == 0 {
            return bad("replay window and update period must be positive");
        }
        if matches!(self.max_update_norm, Some(c) if !(c > 0.0)) {
            return bad("update clip must be positive");
        }
        if let Evaluator::Distributed(s) = &self.evaluator {
            s.admm.validate().map_err(|e| LearnerError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha0 * self.alpha_decay.powi(t as i32)
    }

    pub fn epsilon(&self, t: usize) -> f64 {
        self.epsilon0 * self.epsilon_decay.powi(t as i32)
    }
}

impl Evaluator {
    pub fn centralized() -> Self {
        Evaluator::Centralized { tol: TRAINING_TOL }
    }
}

pub fn td_error(cost: f64, v_next: f64, q_current: f64, gamma: f64) -> f64 {
    cost + gamma * v_next - q_current
}

/// `theta + alpha * delta * grad`.
pub fn local_update(theta: &DVector<f64>, delta: f64, grad: &DVector<f64>, alpha: f64) -> DVector<f64> {
    theta + grad * (alpha * delta)
}

/// One transition as seen by the network: per-agent TD estimates and sensitivities.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub step: usize,
    /// Agent `i`'s estimate of the global TD error.
    pub td_errors: Vec<f64>,
    pub gradients: Vec<DVector<f64>>,
}

impl Experience {
    pub fn td_error(&self) -> f64 {
        self.td_errors.iter().sum::<f64>() / self.td_errors.len() as f64
    }
}

/// Sliding window over the most recent experiences.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    window: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), items: VecDeque::with_capacity(window) }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Window averages `(mean delta_i, mean g_i)` for agent `i`.
    pub fn averages(&self, agent: usize) -> Option<(f64, DVector<f64>)> {
        let first = self.items.front()?;
        let k = self.items.len() as f64;
        let mut g = DVector::zeros(first.gradients[agent].len());
        let mut d = 0.0;
        for e in &self.items {
            d += e.td_errors[agent];
            g += &e.gradients[agent];
        }
        Some((d / k, g / k))
    }
}
