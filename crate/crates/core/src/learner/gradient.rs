use nalgebra::DVector;

use super::{LearnerError, STALE_DUAL_TOL};
use crate::approximator::{central_qp, AgentRows, AgentSolution, ApproxError, EvalRequest, MpcScheme};
use crate::qp::{self, KktSolution, QuadProgram};

/// Parameter gradient of agent `i`'s share of the Lagrangian at a primal-dual solution,
/// in the order of [`crate::linsys::AgentParams::flatten`].
pub fn lagrangian_gradient(scheme: &MpcScheme, agent: usize, sol: &AgentSolution) -> Result<DVector<f64>, LearnerError> {
    if !(sol.kkt_residual <= STALE_DUAL_TOL) {
        return Err(LearnerError::StaleDuals { agent, residual: sol.kkt_residual });
    }
    let c = &scheme.config;
    let p = &scheme.params[agent];
    let (n, m, nh) = (scheme.n(), scheme.m(), c.horizon);
    let rows = [true, false]
        .into_iter()
        .map(|fixes| AgentRows::new(scheme, fixes))
        .find(|r| r.num_eq() == sol.eq_duals.len() && r.num_ineq() == sol.ineq_duals.len())
        .ok_or_else(|| ApproxError::Dimension(format!("duals of agent {agent} do not match the row layout")))?;
    if sol.x.len() != nh + 1 || sol.u.len() != nh {
        return Err(ApproxError::Dimension(format!("trajectory of agent {agent} does not match the horizon")).into());
    }
    let mu = |k: usize, r: usize| sol.eq_duals[rows.dynamics(k) + r];
    let neighbor = |j: usize| {
        sol.neighbor_x
            .iter()
            .find(|(id, _)| *id == j)
            .map(|(_, xs)| xs)
            .ok_or_else(|| ApproxError::Dimension(format!("agent {agent} holds no copy of agent {j}")))
    };

    let mut grad = Vec::with_capacity(p.len());
    grad.push(1.0);
    for r in 0..n {
        grad.push((0..nh).map(|k| sol.ineq_duals[rows.lower(k) + r]).sum());
    }
    for r in 0..n {
        grad.push(-(0..nh).map(|k| sol.ineq_duals[rows.upper(k) + r]).sum::<f64>());
    }
    for r in 0..n {
        grad.push(-(0..nh).map(|k| mu(k, r)).sum::<f64>());
    }
    let lin = |k: usize| if c.discount_linear { c.gamma.powi(k as i32) } else { 1.0 };
    for r in 0..n {
        grad.push((0..nh).map(|k| lin(k) * sol.x[k][r]).sum());
    }
    for r in 0..m {
        grad.push((0..nh).map(|k| lin(k) * sol.u[k][r]).sum());
    }
    let mut bilinear = |traj: &[DVector<f64>], cols: usize| {
        for r in 0..n {
            for cc in 0..cols {
                grad.push(-(0..nh).map(|k| mu(k, r) * traj[k][cc]).sum::<f64>());
            }
        }
    };
    bilinear(&sol.x, n);
    bilinear(&sol.u, m);
    for &j in p.dynamics.a_neighbors.keys() {
        bilinear(neighbor(j)?, n);
    }
    Ok(DVector::from_vec(grad))
}

fn with_parameter(scheme: &MpcScheme, agent: usize, index: usize, delta: f64) -> Result<MpcScheme, ApproxError> {
    let mut out = scheme.clone();
    let mut thetas = scheme.thetas();
    thetas[agent][index] += delta;
    out.set_thetas(&thetas)?;
    Ok(out)
}

/// Lagrangian of the monolithic program differentiated through its data. The data are
/// affine in the parameters, so a unit central difference of each matrix is exact.
pub fn data_difference_gradient(
    scheme: &MpcScheme,
    req: &EvalRequest,
    tol: f64,
) -> Result<Vec<DVector<f64>>, ApproxError> {
    let base = qp::solve(&central_qp(scheme, req)?, tol)?;
    let thetas = scheme.thetas();
    let mut out = Vec::with_capacity(thetas.len());
    for (i, theta) in thetas.iter().enumerate() {
        let mut grad = DVector::zeros(theta.len());
        for p in 0..theta.len() {
            let plus = central_qp(&with_parameter(scheme, i, p, 1.0)?, req)?;
            let minus = central_qp(&with_parameter(scheme, i, p, -1.0)?, req)?;
            grad[p] = lagrangian_slope(&plus, &minus, &base);
        }
        out.push(grad);
    }
    Ok(out)
}

fn lagrangian_slope(plus: &QuadProgram, minus: &QuadProgram, at: &KktSolution) -> f64 {
    let x = &at.x;
    let dh = (&plus.h - &minus.h) * 0.5;
    let dg = (&plus.g - &minus.g) * 0.5;
    let deq = (&plus.a_eq - &minus.a_eq) * x - (&plus.b_eq - &minus.b_eq);
    let din = (&plus.a_ineq - &minus.a_ineq) * x - (&plus.b_ineq - &minus.b_ineq);
    0.5 * x.dot(&(dh * x))
        + dg.dot(x)
        + 0.5 * (plus.c0 - minus.c0)
        + 0.5 * at.eq_duals.dot(&deq)
        + 0.5 * at.ineq_duals.dot(&din)
}

/// Central differences of the centralised optimal value.
#[derive(Clone, Debug)]
pub struct FiniteDifference {
    pub gradient: Vec<DVector<f64>>,
    /// Components whose perturbed solves changed the active set.
    pub crossing: Vec<Vec<bool>>,
}

pub fn finite_difference_gradient(
    scheme: &MpcScheme,
    req: &EvalRequest,
    h: f64,
    tol: f64,
) -> Result<FiniteDifference, ApproxError> {
    let sorted = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    let base = sorted(qp::solve(&central_qp(scheme, req)?, tol)?.active);
    let thetas = scheme.thetas();
    let mut gradient = Vec::with_capacity(thetas.len());
    let mut crossing = Vec::with_capacity(thetas.len());
    for (i, theta) in thetas.iter().enumerate() {
        let mut g = DVector::zeros(theta.len());
        let mut cross = vec![false; theta.len()];
        for p in 0..theta.len() {
            let plus = qp::solve(&central_qp(&with_parameter(scheme, i, p, h)?, req)?, tol)?;
            let minus = qp::solve(&central_qp(&with_parameter(scheme, i, p, -h)?, req)?, tol)?;
            g[p] = (plus.objective - minus.objective) / (2.0 * h);
            cross[p] = sorted(plus.active) != base || sorted(minus.active) != base;
        }
        gradient.push(g);
        crossing.push(cross);
    }
    Ok(FiniteDifference { gradient, crossing })
}
