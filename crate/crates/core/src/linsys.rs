//! Parametrised affine agent models, local stage costs and the three-agent benchmark plant.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::GraphTopology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinsysError {
    #[error("agent expects neighbours {expected:?}, got {got:?}")]
    NeighborMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `x+ = A x + B u + sum_j A_ij x_j + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_neighbors: BTreeMap<usize, DMatrix<f64>>,
    pub offset: DVector<f64>,
}

impl DynamicsParams {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        a_neighbors: BTreeMap<usize, DMatrix<f64>>,
        offset: DVector<f64>,
    ) -> Result<Self, LinsysError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || offset.len() != n {
            return Err(LinsysError::Dimension(format!(
                "A is {}x{}, B is {}x{}, b has {} entries",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                offset.len()
            )));
        }
        for (j, aij) in &a_neighbors {
            if aij.shape() != (n, n) {
                return Err(LinsysError::Dimension(format!("coupling matrix for neighbour {j} is {:?}", aij.shape())));
            }
        }
        Ok(Self { a, b, a_neighbors, offset })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn neighbors(&self) -> Vec<usize> {
        self.a_neighbors.keys().copied().collect()
    }

    pub fn predict(
        &self,
        s: &DVector<f64>,
        a: &DVector<f64>,
        neighbor_states: &BTreeMap<usize, DVector<f64>>,
    ) -> Result<DVector<f64>, LinsysError> {
        if !self.a_neighbors.keys().eq(neighbor_states.keys()) {
            return Err(LinsysError::NeighborMismatch {
                expected: self.neighbors(),
                got: neighbor_states.keys().copied().collect(),
            });
        }
        if s.len() != self.n() || a.len() != self.m() {
            return Err(LinsysError::Dimension(format!("state has {} entries, action {}", s.len(), a.len())));
        }
        let mut next = &self.a * s + &self.b * a + &self.offset;
        for (j, aij) in &self.a_neighbors {
            let sj = &neighbor_states[j];
            if sj.len() != self.n() {
                return Err(LinsysError::Dimension(format!("neighbour {j} state has {} entries", sj.len())));
            }
            next += aij * sj;
        }
        Ok(next)
    }
}

/// Learnable parameters of one agent.
///
/// Flattened order: `V0, x_lb, x_ub, b, f, A (row-major), B (row-major)`, then each
/// coupling matrix row-major for neighbours in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub v0: f64,
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub f: DVector<f64>,
    pub dynamics: DynamicsParams,
}

impl AgentParams {
    /// Zero cost and bound offsets on top of the given model.
    pub fn from_model(dynamics: DynamicsParams) -> Self {
        let (n, m) = (dynamics.n(), dynamics.m());
        Self { v0: 0.0, x_lb: DVector::zeros(n), x_ub: DVector::zeros(n), f: DVector::zeros(n + m), dynamics }
    }

    pub fn n(&self) -> usize {
        self.dynamics.n()
    }

    pub fn m(&self) -> usize {
        self.dynamics.m()
    }

    pub fn len(&self) -> usize {
        let (n, m) = (self.n(), self.m());
        1 + 3 * n + (n + m) + n * n + n * m + self.dynamics.a_neighbors.len() * n * n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.v0);
        out.extend(self.x_lb.iter());
        out.extend(self.x_ub.iter());
        out.extend(self.dynamics.offset.iter());
        out.extend(self.f.iter());
        push_row_major(&mut out, &self.dynamics.a);
        push_row_major(&mut out, &self.dynamics.b);
        for aij in self.dynamics.a_neighbors.values() {
            push_row_major(&mut out, aij);
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`AgentParams::flatten`], keeping dimensions and neighbourhood.
    pub fn assign(&mut self, theta: &DVector<f64>) -> Result<(), LinsysError> {
        if theta.len() != self.len() {
            return Err(LinsysError::Dimension(format!("expected {} parameters, got {}", self.len(), theta.len())));
        }
        let mut it = theta.iter().copied();
        self.v0 = it.next().unwrap();
        for v in self
            .x_lb
            .iter_mut()
            .chain(self.x_ub.iter_mut())
            .chain(self.dynamics.offset.iter_mut())
            .chain(self.f.iter_mut())
        {
            *v = it.next().unwrap();
        }
        fill_row_major(&mut self.dynamics.a, &mut it);
        fill_row_major(&mut self.dynamics.b, &mut it);
        for aij in self.dynamics.a_neighbors.values_mut() {
            fill_row_major(aij, &mut it);
        }
        Ok(())
    }

    /// Names aligned with [`AgentParams::flatten`], e.g. `A[0,1]` or `A_2[1,1]`.
    pub fn names(&self) -> Vec<String> {
        let (n, m) = (self.n(), self.m());
        let mut out = vec!["V0".to_string()];
        out.extend((0..n).map(|c| format!("x_lb[{c}]")));
        out.extend((0..n).map(|c| format!("x_ub[{c}]")));
        out.extend((0..n).map(|c| format!("b[{c}]")));
        out.extend((0..n + m).map(|c| format!("f[{c}]")));
        let matrix = |name: String, rows: usize, cols: usize| -> Vec<String> {
            (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| format!("{name}[{r},{c}]")).collect()
        };
        out.extend(matrix("A".into(), n, n));
        out.extend(matrix("B".into(), n, m));
        for j in self.dynamics.a_neighbors.keys() {
            out.extend(matrix(format!("A_{j}"), n, n));
        }
        out
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

fn fill_row_major(m: &mut DMatrix<f64>, it: &mut impl Iterator<Item = f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = it.next().unwrap();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub states: Vec<DVector<f64>>,
    pub t: usize,
}

impl JointState {
    pub fn new(states: Vec<DVector<f64>>) -> Self {
        Self { states, t: 0 }
    }

    pub fn num_agents(&self) -> usize {
        self.states.len()
    }

    pub fn neighbor_states(&self, neighbors: &[usize]) -> BTreeMap<usize, DVector<f64>> {
        neighbors.iter().map(|&j| (j, self.states[j].clone())).collect()
    }
}

/// Plant and cost settings of the benchmark; defaults are the published values.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub s_lb: DVector<f64>,
    pub s_ub: DVector<f64>,
    pub omega: DVector<f64>,
    /// Uniform noise interval for the first state component.
    pub noise: (f64, f64),
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            s_lb: DVector::from_vec(vec![0.0, -1.0]),
            s_ub: DVector::from_vec(vec![1.0, 1.0]),
            omega: DVector::from_vec(vec![100.0, 100.0]),
            noise: (-0.1, 0.0),
        }
    }
}

impl EnvConfig {
    /// `|s|^2 + |u|^2 / 2` plus the weighted bound violations, per component.
    pub fn stage_cost(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let mut cost = s.norm_squared() + 0.5 * a.norm_squared();
        for c in 0..s.len() {
            cost += self.omega[c] * ((self.s_lb[c] - s[c]).max(0.0) + (s[c] - self.s_ub[c]).max(0.0));
        }
        cost
    }

    pub fn violates(&self, s: &DVector<f64>, tol: f64) -> bool {
        (0..s.len()).any(|c| s[c] < self.s_lb[c] - tol || s[c] > self.s_ub[c] + tol)
    }
}

pub fn true_dynamics(neighbors: &[usize]) -> DynamicsParams {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.35, 0.0, 1.1]);
    let b = DMatrix::from_column_slice(2, 1, &[0.0813, 0.2]);
    let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -0.1]);
    let a_neighbors = neighbors.iter().map(|&j| (j, coupling.clone())).collect();
    DynamicsParams { a, b, a_neighbors, offset: DVector::zeros(2) }
}

/// Perturbations of the uncertain model family around its nominal point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelPerturbation {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
}

impl ModelPerturbation {
    pub const A_RANGE: (f64, f64) = (-0.1, 0.1);
    pub const B1_RANGE: (f64, f64) = (0.0, 0.075);
    pub const B2_RANGE: (f64, f64) = (-0.075, 0.0);
    pub const C_RANGE: (f64, f64) = (-0.1, 0.0);

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        Self {
            a1: u(Self::A_RANGE),
            a2: u(Self::A_RANGE),
            a3: u(Self::A_RANGE),
            b1: u(Self::B1_RANGE),
            b2: u(Self::B2_RANGE),
            c: u(Self::C_RANGE),
        }
    }

    pub fn model(&self, neighbors: &[usize]) -> DynamicsParams {
        let a = DMatrix::from_row_slice(2, 2, &[1.0 + self.a1, 0.25 + self.a2, 0.0, 1.0 + self.a3]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0312 + self.b1, 0.25 + self.b2]);
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, self.c]);
        let a_neighbors = neighbors.iter().map(|&j| (j, coupling.clone())).collect();
        DynamicsParams { a, b, a_neighbors, offset: DVector::zeros(2) }
    }
}

pub fn nominal_model(neighbors: &[usize]) -> DynamicsParams {
    ModelPerturbation::default().model(neighbors)
}

pub fn sample_inaccurate_model<R: Rng + ?Sized>(rng: &mut R, neighbors: &[usize]) -> DynamicsParams {
    ModelPerturbation::sample(rng).model(neighbors)
}

/// The true networked plant with additive noise on the first state component.
#[derive(Clone, Debug)]
pub struct AcademicEnv {
    pub dynamics: Vec<DynamicsParams>,
    pub config: EnvConfig,
    rng: ChaCha8Rng,
}

impl AcademicEnv {
    pub fn new(topology: &GraphTopology, config: EnvConfig, seed: u64) -> Self {
        let dynamics = (0..topology.num_agents()).map(|i| true_dynamics(topology.neighbors(i))).collect();
        Self { dynamics, config, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn num_agents(&self) -> usize {
        self.dynamics.len()
    }

    pub fn sample_noise(&mut self) -> f64 {
        sample_interval(&mut self.rng, self.config.noise)
    }

    /// Advance the plant; returns the next state and the local stage costs at `(state, actions)`.
    pub fn step(&mut self, state: &JointState, actions: &[DVector<f64>]) -> Result<(JointState, Vec<f64>), LinsysError> {
        let m = self.num_agents();
        if state.num_agents() != m || actions.len() != m {
            return Err(LinsysError::Dimension(format!(
                "{} agents, {} states, {} actions",
                m,
                state.num_agents(),
                actions.len()
            )));
        }
        let mut next = Vec::with_capacity(m);
        for i in 0..m {
            let dyn_i = &self.dynamics[i];
            let neighbors = state.neighbor_states(&dyn_i.neighbors());
            let mut s = dyn_i.predict(&state.states[i], &actions[i], &neighbors)?;
            s[0] += sample_interval(&mut self.rng, self.config.noise);
            next.push(s);
        }
        let costs = (0..m).map(|i| self.config.stage_cost(&state.states[i], &actions[i])).collect();
        Ok((JointState { states: next, t: state.t + 1 }, costs))
    }

    /// Fresh start drawn uniformly over the state box.
    pub fn random_state(&mut self) -> JointState {
        let states = (0..self.num_agents())
            .map(|_| {
                DVector::from_iterator(
                    self.config.s_lb.len(),
                    (0..self.config.s_lb.len())
                        .map(|c| sample_interval(&mut self.rng, (self.config.s_lb[c], self.config.s_ub[c]))),
                )
            })
            .collect();
        JointState::new(states)
    }
}

pub(crate) fn sample_interval<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
