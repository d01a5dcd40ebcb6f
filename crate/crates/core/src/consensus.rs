//! Consensus ADMM over an agent network.
//!
//! Every agent `o` whose variables are copied by someone owns a global block `z_o`. Agent
//! `i` keeps an augmented vector `x~_i` made of its own block (if shared) followed by its
//! copies of the neighbours' blocks, ascending. One round is
//!
//! ```text
//! x~_i <- argmin F_i(x~_i, ...) + y_i' x~_i + rho/2 |x~_i - z~_i|^2     (in parallel)
//! z_o  <- mean of the owner's block and all copies of it
//! y_i  <- y_i + rho (x~_i - z~_i)
//! ```

use nalgebra::DVector;
use thiserror::Error;

use crate::exec::Execution;
use crate::qp::QpError;
use crate::topology::GraphTopology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("local problem of agent {agent} failed at iteration {iteration}: {source}")]
    Local { agent: usize, iteration: usize, source: QpError },
    #[error("primal residual diverged at iteration {iteration} (residual {residual:e})")]
    DivergenceDetected { iteration: usize, residual: f64 },
    #[error("invalid settings: {0}")]
    Settings(String),
}

/// One agent's ADMM subproblem. `shift` is `y_i - rho z~_i`; the quadratic `rho/2 |x~_i|^2`
/// is part of the problem itself.
pub trait ConsensusSubproblem: Sync {
    type Solution: Send + Clone;

    fn solve(&self, shift: &DVector<f64>) -> Result<(DVector<f64>, Self::Solution), QpError>;

    /// Local objective without the ADMM terms.
    fn objective(&self, solution: &Self::Solution) -> f64;
}

/// Which global blocks make up each agent's augmented vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SharingPattern {
    blocks: Vec<Vec<usize>>,
    block_len: Vec<usize>,
    offsets: Vec<Vec<usize>>,
}

impl SharingPattern {
    /// `blocks[i]` lists the owners of agent `i`'s blocks in order; `block_len[o]` is the
    /// size of owner `o`'s block.
    pub fn new(blocks: Vec<Vec<usize>>, block_len: Vec<usize>) -> Self {
        let offsets = blocks
            .iter()
            .map(|bs| {
                bs.iter()
                    .scan(0, |acc, &o| {
                        let at = *acc;
                        *acc += block_len[o];
                        Some(at)
                    })
                    .collect()
            })
            .collect();
        Self { blocks, block_len, offsets }
    }

    /// Own block first when some agent copies it, then neighbours ascending.
    pub fn from_topology(topology: &GraphTopology, block_len: usize) -> Self {
        let m = topology.num_agents();
        let blocks = (0..m)
            .map(|i| {
                let mut b = Vec::new();
                if !topology.copiers(i).is_empty() {
                    b.push(i);
                }
                b.extend_from_slice(topology.neighbors(i));
                b
            })
            .collect();
        Self::new(blocks, vec![block_len; m])
    }

    pub fn num_agents(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self, agent: usize) -> &[usize] {
        &self.blocks[agent]
    }

    pub fn block_len(&self, owner: usize) -> usize {
        self.block_len[owner]
    }

    pub fn shared_len(&self, agent: usize) -> usize {
        self.blocks[agent].iter().map(|&o| self.block_len[o]).sum()
    }

    /// `(agent, offset)` of every block that references owner `o`.
    pub fn holders(&self, owner: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, bs) in self.blocks.iter().enumerate() {
            for (pos, &o) in bs.iter().enumerate() {
                if o == owner {
                    out.push((i, self.offsets[i][pos]));
                }
            }
        }
        out
    }

    fn gather(&self, agent: usize, z: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.shared_len(agent));
        for (pos, &o) in self.blocks[agent].iter().enumerate() {
            out.rows_mut(self.offsets[agent][pos], self.block_len[o]).copy_from(&z[o]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub iterations: usize,
    pub execution: Execution,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self { rho: 0.5, iterations: 50, execution: Execution::default() }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        if self.iterations == 0 {
            return Err(ConsensusError::Settings("at least one ADMM iteration is required".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(ConsensusError::Settings(format!("penalty must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// ADMM state: augmented primal copies, global blocks and consensus multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmWorkspace {
    pub pattern: SharingPattern,
    pub rho: f64,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub z_prev: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub iteration: usize,
}

impl AdmmWorkspace {
    /// All copies, global blocks and multipliers at zero.
    pub fn new(pattern: SharingPattern, rho: f64) -> Self {
        let m = pattern.num_agents();
        let x: Vec<_> = (0..m).map(|i| DVector::zeros(pattern.shared_len(i))).collect();
        let z: Vec<_> = (0..m).map(|o| DVector::zeros(pattern.block_len(o))).collect();
        Self { y: x.clone(), x, z_prev: z.clone(), z, pattern, rho, iteration: 0 }
    }

    pub fn z_tilde(&self, agent: usize) -> DVector<f64> {
        self.pattern.gather(agent, &self.z)
    }

    fn z_tilde_prev(&self, agent: usize) -> DVector<f64> {
        self.pattern.gather(agent, &self.z_prev)
    }

    /// Averaging step: each global block becomes the mean of its owner's value and all copies.
    fn update_z(&mut self) {
        self.z_prev = self.z.clone();
        for o in 0..self.z.len() {
            let holders = self.pattern.holders(o);
            if holders.is_empty() {
                continue;
            }
            let len = self.pattern.block_len(o);
            let mut acc = DVector::zeros(len);
            for &(i, off) in &holders {
                acc += self.x[i].rows(off, len);
            }
            self.z[o] = acc / holders.len() as f64;
        }
    }

    fn update_y(&mut self) {
        for i in 0..self.x.len() {
            let zt = self.z_tilde(i);
            self.y[i] += (&self.x[i] - zt) * self.rho;
        }
    }

    /// Largest absolute entry of the summed multiplier blocks over the holders of each
    /// global block.
    pub fn multiplier_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for o in 0..self.z.len() {
            let len = self.pattern.block_len(o);
            let holders = self.pattern.holders(o);
            if holders.is_empty() {
                continue;
            }
            let mut acc = DVector::zeros(len);
            for (i, off) in holders {
                acc += self.y[i].rows(off, len);
            }
            worst = worst.max(acc.amax());
        }
        worst
    }
}

/// `|x~ - z~|` stacked over agents.
pub fn primal_residual(ws: &AdmmWorkspace) -> f64 {
    (0..ws.x.len()).map(|i| (&ws.x[i] - ws.z_tilde(i)).norm_squared()).sum::<f64>().sqrt()
}

/// `rho |z~ - z~_prev|` stacked over agents.
pub fn dual_residual(ws: &AdmmWorkspace) -> f64 {
    let sq: f64 = (0..ws.x.len()).map(|i| (ws.z_tilde(i) - ws.z_tilde_prev(i)).norm_squared()).sum();
    ws.rho * sq.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRecord {
    pub iteration: usize,
    pub primal: f64,
    pub dual: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct AdmmOutcome<S> {
    /// Local solutions of the last round.
    pub solutions: Vec<S>,
    pub trace: Vec<ResidualRecord>,
}

const DIVERGENCE_WINDOW: usize = 20;
const DIVERGENCE_RATIO: f64 = 10.0;
const DIVERGENCE_FLOOR: f64 = 1e-8;

/// Cold-started consensus ADMM for `settings.iterations` rounds.
pub fn admm_solve<P: ConsensusSubproblem>(
    problems: &[P],
    pattern: &SharingPattern,
    settings: AdmmSettings,
) -> Result<(AdmmOutcome<P::Solution>, AdmmWorkspace), ConsensusError> {
    let mut ws = AdmmWorkspace::new(pattern.clone(), settings.rho);
    let out = admm_run(problems, &mut ws, settings.iterations, settings.execution, |_, _, _| {})?;
    Ok((out, ws))
}

/// Continue ADMM from the given workspace. `observer(iteration, solutions, workspace)` sees
/// every round after its multiplier update.
pub fn admm_run<P, F>(
    problems: &[P],
    ws: &mut AdmmWorkspace,
    iterations: usize,
    execution: Execution,
    mut observer: F,
) -> Result<AdmmOutcome<P::Solution>, ConsensusError>
where
    P: ConsensusSubproblem,
    F: FnMut(usize, &[P::Solution], &AdmmWorkspace),
{
    AdmmSettings { rho: ws.rho, iterations, execution }.validate()?;
    if problems.len() != ws.pattern.num_agents() {
        return Err(ConsensusError::Settings(format!(
            "{} subproblems for {} agents",
            problems.len(),
            ws.pattern.num_agents()
        )));
    }
    let m = problems.len();
    let mut trace: Vec<ResidualRecord> = Vec::with_capacity(iterations);
    let mut solutions = Vec::new();
    let mut rising = 0;
    for _ in 0..iterations {
        let iteration = ws.iteration + 1;
        let shifts: Vec<DVector<f64>> = (0..m).map(|i| &ws.y[i] - ws.z_tilde(i) * ws.rho).collect();
        let results = execution.try_map(m, |i| {
            problems[i]
                .solve(&shifts[i])
                .map_err(|source| ConsensusError::Local { agent: i, iteration, source })
        })?;
        let (xs, sols): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        ws.x = xs;
        ws.update_z();
        ws.update_y();
        ws.iteration = iteration;
        let objective = problems.iter().zip(&sols).map(|(p, s)| p.objective(s)).sum();
        let record = ResidualRecord { iteration, primal: primal_residual(ws), dual: dual_residual(ws), objective };
        if let Some(last) = trace.last() {
            rising = if record.primal > last.primal { rising + 1 } else { 0 };
        }
        trace.push(record);
        if rising >= DIVERGENCE_WINDOW {
            let base = trace[trace.len() - 1 - DIVERGENCE_WINDOW].primal;
            if record.primal > DIVERGENCE_RATIO * base && record.primal > DIVERGENCE_FLOOR {
                return Err(ConsensusError::DivergenceDetected { iteration, residual: record.primal });
            }
        }
        if !record.primal.is_finite() {
            return Err(ConsensusError::DivergenceDetected { iteration, residual: record.primal });
        }
        observer(iteration, &sols, ws);
        solutions = sols;
    }
    Ok(AdmmOutcome { solutions, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min 1/2 |x - c|^2 + rho/2 |x|^2 + shift' x` over the shared vector only.
    struct Quadratic {
        target: DVector<f64>,
        rho: f64,
    }

    impl ConsensusSubproblem for Quadratic {
        type Solution = DVector<f64>;

        fn solve(&self, shift: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), QpError> {
            let x = (&self.target - shift) / (1.0 + self.rho);
            Ok((x.clone(), x))
        }

        fn objective(&self, x: &DVector<f64>) -> f64 {
            0.5 * (x - &self.target).norm_squared()
        }
    }

    #[test]
    fn pattern_from_chain() {
        let g = GraphTopology::chain(3).unwrap();
        let p = SharingPattern::from_topology(&g, 4);
        assert_eq!(p.blocks(0), &[0, 1]);
        assert_eq!(p.blocks(1), &[1, 0, 2]);
        assert_eq!(p.blocks(2), &[2, 1]);
        assert_eq!(p.shared_len(1), 12);
        assert_eq!(p.holders(1), vec![(0, 4), (1, 0), (2, 4)]);
        let g = GraphTopology::with_communication(3, [], [(0, 1), (1, 2)]).unwrap();
        let p = SharingPattern::from_topology(&g, 4);
        assert!((0..3).all(|i| p.shared_len(i) == 0));
    }

    #[test]
    fn agreement_on_a_shared_scalar() {
        // three agents pull one shared scalar (owned by agent 0) toward 1, 2, 6
        let pattern = SharingPattern::new(vec![vec![0], vec![0], vec![0]], vec![1, 0, 0]);
        let rho = 1.0;
        let problems: Vec<_> =
            [1.0, 2.0, 6.0].iter().map(|&c| Quadratic { target: DVector::from_element(1, c), rho }).collect();
        let settings = AdmmSettings { rho, iterations: 200, execution: Execution::Sequential };
        let (out, ws) = admm_solve(&problems, &pattern, settings).unwrap();
        assert!((ws.z[0][0] - 3.0).abs() < 1e-10);
        assert!(out.solutions.iter().all(|x| (x[0] - 3.0).abs() < 1e-10));
        assert!(ws.multiplier_sum_error() < 1e-12);
        assert!(out.trace.iter().all(|r| r.primal.is_finite() && r.dual.is_finite()));
        assert_eq!(out.trace.len(), 200);
        let last = out.trace.last().unwrap();
        assert!(last.primal < 1e-10 && last.dual < 1e-10);
    }

    #[test]
    fn z_update_is_the_exact_mean() {
        let pattern = SharingPattern::new(vec![vec![0, 1], vec![1, 0]], vec![2, 1]);
        let mut ws = AdmmWorkspace::new(pattern, 0.5);
        ws.x[0] = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        ws.x[1] = DVector::from_vec(vec![5.0, 7.0, 10.0]);
        ws.update_z();
        assert_eq!(ws.z[0], DVector::from_vec(vec![4.0, 6.0]));
        assert_eq!(ws.z[1], DVector::from_vec(vec![4.0]));
        // deviations from the mean cancel per global block
        let dev0 = ws.x[0].rows(0, 2) - &ws.z[0] + (ws.x[1].rows(1, 2) - &ws.z[0]);
        assert_eq!(dev0, DVector::zeros(2));
        ws.update_y();
        assert!(ws.multiplier_sum_error() == 0.0);
    }

    #[test]
    fn consistent_workspace_has_zero_residual() {
        let pattern = SharingPattern::new(vec![vec![0], vec![0]], vec![2, 0]);
        let mut ws = AdmmWorkspace::new(pattern, 1.0);
        ws.z[0] = DVector::from_vec(vec![1.0, -1.0]);
        ws.x = vec![ws.z[0].clone(), ws.z[0].clone()];
        assert_eq!(primal_residual(&ws), 0.0);
        ws.z_prev[0] = DVector::zeros(2);
        assert!((dual_residual(&ws) - 2.0f64.sqrt() * 2.0f64.sqrt()).abs() < 1e-15);
    }

    /// Pushes its copy away from the mean every round.
    struct Repulsive {
        sign: f64,
    }

    impl ConsensusSubproblem for Repulsive {
        type Solution = ();

        fn solve(&self, shift: &DVector<f64>) -> Result<(DVector<f64>, ()), QpError> {
            Ok((shift * -3.0 + DVector::from_element(shift.len(), self.sign), ()))
        }

        fn objective(&self, _: &()) -> f64 {
            0.0
        }
    }

    #[test]
    fn divergence_is_reported() {
        let pattern = SharingPattern::new(vec![vec![0], vec![0]], vec![1, 0]);
        let problems = [Repulsive { sign: 1.0 }, Repulsive { sign: -1.0 }];
        let settings = AdmmSettings { rho: 1.0, iterations: 200, execution: Execution::Sequential };
        let err = admm_solve(&problems, &pattern, settings).unwrap_err();
        assert!(matches!(err, ConsensusError::DivergenceDetected { .. }), "{err:?}");
    }

    #[test]
    fn settings_are_validated() {
        let pattern = SharingPattern::new(vec![vec![0]], vec![1]);
        let problems = [Quadratic { target: DVector::zeros(1), rho: 1.0 }];
        let bad = AdmmSettings { rho: 0.0, iterations: 5, execution: Execution::Sequential };
        assert!(matches!(admm_solve(&problems, &pattern, bad), Err(ConsensusError::Settings(_))));
        let bad = AdmmSettings { rho: 1.0, iterations: 0, execution: Execution::Sequential };
        assert!(matches!(admm_solve(&problems, &pattern, bad), Err(ConsensusError::Settings(_))));
    }
}
