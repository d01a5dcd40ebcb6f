//! Agent coupling graphs and global average consensus.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("a network needs at least {min} agents, got {got}")]
    TooFewAgents { min: usize, got: usize },
    #[error("edge ({0}, {1}) references an agent outside 0..{2}")]
    UnknownAgent(usize, usize, usize),
    #[error("self loop ({0}, {0}) is not allowed")]
    SelfLoop(usize),
    #[error("communication graph is not connected")]
    Disconnected,
    #[error("coupled agents {0} and {1} cannot communicate")]
    CouplingWithoutLink(usize, usize),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Coupling graph of the network.
///
/// An edge `(i, j)` means agent `i` affects the dynamics or cost of agent `j`, so `i`
/// belongs to the neighbourhood of `j`. Agents communicate over an undirected graph that
/// contains every coupling edge; by default it is exactly the undirected closure of the
/// coupling edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    num_agents: usize,
    edges: BTreeSet<(usize, usize)>,
    neighborhoods: Vec<Vec<usize>>,
    links: Vec<Vec<usize>>,
    consensus_matrix: DMatrix<f64>,
}

impl GraphTopology {
    pub fn new(num_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        let links: Vec<(usize, usize)> = edges.iter().copied().collect();
        Self::with_communication(num_agents, edges, links)
    }

    /// Coupling edges plus an explicit (undirected) communication graph.
    pub fn with_communication(
        num_agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        links: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        if num_agents == 0 {
            return Err(TopologyError::TooFewAgents { min: 1, got: 0 });
        }
        let edges: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        let mut link_sets = vec![BTreeSet::new(); num_agents];
        for (i, j) in links {
            check_pair(i, j, num_agents)?;
            link_sets[i].insert(j);
            link_sets[j].insert(i);
        }
        let mut neighborhoods = vec![BTreeSet::new(); num_agents];
        for &(i, j) in &edges {
            check_pair(i, j, num_agents)?;
            if !link_sets[j].contains(&i) {
                return Err(TopologyError::CouplingWithoutLink(i, j));
            }
            neighborhoods[j].insert(i);
        }
        let links: Vec<Vec<usize>> = link_sets.into_iter().map(|s| s.into_iter().collect()).collect();
        if !is_connected(&links) {
            return Err(TopologyError::Disconnected);
        }
        let consensus_matrix = metropolis_weights(&links);
        Ok(Self {
            num_agents,
            edges,
            neighborhoods: neighborhoods.into_iter().map(|s| s.into_iter().collect()).collect(),
            links,
            consensus_matrix,
        })
    }

    /// Chain `0 <-> 1 <-> ... <-> M-1` with couplings in both directions.
    pub fn chain(num_agents: usize) -> Result<Self, TopologyError> {
        if num_agents < 2 {
            return Err(TopologyError::TooFewAgents { min: 2, got: num_agents });
        }
        let edges = (0..num_agents - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]);
        Self::new(num_agents, edges)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Agents whose states enter agent `i`'s model, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    /// Agents that hold a copy of agent `i`'s states, ascending.
    pub fn copiers(&self, i: usize) -> Vec<usize> {
        (0..self.num_agents).filter(|&j| self.neighborhoods[j].contains(&i)).collect()
    }

    /// Communication partners of agent `i`.
    pub fn links(&self, i: usize) -> &[usize] {
        &self.links[i]
    }

    pub fn consensus_matrix(&self) -> &DMatrix<f64> {
        &self.consensus_matrix
    }

    /// One synchronous averaging round `v <- P v`.
    pub fn gac_round(&self, values: &DVector<f64>) -> Result<DVector<f64>, TopologyError> {
        if values.len() != self.num_agents {
            return Err(TopologyError::LengthMismatch { expected: self.num_agents, got: values.len() });
        }
        Ok(&self.consensus_matrix * values)
    }

    /// `iterations` rounds of global average consensus.
    pub fn gac_consensus(&self, initial: &DVector<f64>, iterations: usize) -> Result<DVector<f64>, TopologyError> {
        let mut v = initial.clone();
        if v.len() != self.num_agents {
            return Err(TopologyError::LengthMismatch { expected: self.num_agents, got: v.len() });
        }
        for _ in 0..iterations {
            v = &self.consensus_matrix * v;
        }
        Ok(v)
    }
}

fn check_pair(i: usize, j: usize, m: usize) -> Result<(), TopologyError> {
    if i >= m || j >= m {
        return Err(TopologyError::UnknownAgent(i, j, m));
    }
    if i == j {
        return Err(TopologyError::SelfLoop(i));
    }
    Ok(())
}

fn is_connected(links: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; links.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &links[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Metropolis-Hastings weights: `1 / (1 + max(deg_i, deg_j))` on links, diagonal completes
/// each row to one. Symmetric, hence doubly stochastic.
fn metropolis_weights(links: &[Vec<usize>]) -> DMatrix<f64> {
    let m = links.len();
    let mut p = DMatrix::zeros(m, m);
    for i in 0..m {
        for &j in &links[i] {
            p[(i, j)] = 1.0 / (1.0 + links[i].len().max(links[j].len()) as f64);
        }
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    p
}
