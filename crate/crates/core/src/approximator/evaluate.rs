use nalgebra::DVector;

use super::build::{central_parts, split_central, LocalQp};
use super::{AgentSolution, ApproxError, EvalRequest, EvalSettings, EvaluationResult, MpcScheme};
use crate::consensus::{admm_run, AdmmWorkspace, SharingPattern};
use crate::qp;

fn clipped_actions(scheme: &MpcScheme, agents: &[AgentSolution]) -> Vec<DVector<f64>> {
    let c = &scheme.config;
    agents
        .iter()
        .map(|a| DVector::from_iterator(scheme.m(), (0..scheme.m()).map(|r| a.u[0][r].clamp(c.u_lb[r], c.u_ub[r]))))
        .collect()
}

/// Solve the monolithic program over all agents.
pub fn evaluate_centralized(scheme: &MpcScheme, req: &EvalRequest, tol: f64) -> Result<EvaluationResult, ApproxError> {
    let (program, layout) = central_parts(scheme, req)?;
    let kkt = qp::solve(&program, tol)?;
    let agents = split_central(scheme, &layout, &kkt);
    let local_values: Vec<f64> = (0..scheme.num_agents()).map(|i| scheme.local_cost(i, &agents[i])).collect();
    let value = local_values.iter().sum();
    Ok(EvaluationResult {
        value,
        estimates: vec![value; scheme.num_agents()],
        local_values,
        actions: clipped_actions(scheme, &agents),
        agents,
        trace: Vec::new(),
        consensus_spread: 0.0,
    })
}

/// Consensus ADMM on the local programs followed by global average consensus on the value.
pub fn evaluate_distributed(
    scheme: &MpcScheme,
    req: &EvalRequest,
    settings: &EvalSettings,
) -> Result<EvaluationResult, ApproxError> {
    evaluate_distributed_observed(scheme, req, settings, |_, _, _| {})
}

/// As [`evaluate_distributed`], calling `observer` after every ADMM round.
pub fn evaluate_distributed_observed<F>(
    scheme: &MpcScheme,
    req: &EvalRequest,
    settings: &EvalSettings,
    observer: F,
) -> Result<EvaluationResult, ApproxError>
where
    F: FnMut(usize, &[AgentSolution], &AdmmWorkspace),
{
    scheme.validate()?;
    let big_m = scheme.num_agents();
    let admm = settings.admm;
    let problems = admm
        .execution
        .try_map(big_m, |i| LocalQp::new(scheme, i, req, admm.rho, settings.tol))?;
    let pattern = SharingPattern::from_topology(&scheme.topology, scheme.config.horizon * scheme.n());
    let mut ws = AdmmWorkspace::new(pattern, admm.rho);
    let out = admm_run(&problems, &mut ws, admm.iterations, admm.execution, observer)?;
    let agents = out.solutions;
    let local_values: Vec<f64> = (0..big_m).map(|i| scheme.local_cost(i, &agents[i])).collect();
    let initial = DVector::from_iterator(big_m, local_values.iter().map(|v| v * big_m as f64));
    let estimates = scheme
        .topology
        .gac_consensus(&initial, settings.gac_rounds)
        .map_err(|e| ApproxError::Dimension(e.to_string()))?;
    let spread = estimates.max() - estimates.min();
    Ok(EvaluationResult {
        value: estimates.mean(),
        local_values,
        estimates: estimates.iter().copied().collect(),
        actions: clipped_actions(scheme, &agents),
        agents,
        trace: out.trace,
        consensus_spread: spread,
    })
}

/// `sum_i |lambda_i - lambda_i'| + |mu_i - mu_i'|` between two sets of agent solutions.
pub fn dual_error(reference: &[AgentSolution], recovered: &[AgentSolution]) -> f64 {
    reference
        .iter()
        .zip(recovered)
        .map(|(a, b)| (&a.ineq_duals - &b.ineq_duals).norm() + (&a.eq_duals - &b.eq_duals).norm())
        .sum()
}
