use nalgebra::{DMatrix, DVector};

use super::{AgentSolution, ApproxError, EvalRequest, MpcScheme};
use crate::consensus::ConsensusSubproblem;
use crate::qp::{FactoredQp, KktSolution, QpError, QuadProgram};

/// Row layout of one agent's constraints, identical in the local and centralised programs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentRows {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub fixes_action: bool,
}

impl AgentRows {
    pub fn new(scheme: &MpcScheme, fixes_action: bool) -> Self {
        Self { n: scheme.n(), m: scheme.m(), horizon: scheme.config.horizon, fixes_action }
    }

    pub fn num_eq(&self) -> usize {
        self.dynamics(0) + self.horizon * self.n
    }

    /// First row of the dynamics equality `x(k+1) = ...`.
    pub fn dynamics(&self, k: usize) -> usize {
        self.n + if self.fixes_action { self.m } else { 0 } + k * self.n
    }

    pub fn lower(&self, k: usize) -> usize {
        k * self.n
    }

    pub fn upper(&self, k: usize) -> usize {
        (self.horizon + k) * self.n
    }

    /// First input step carrying box constraints (`u(0)` is fixed in Q mode).
    fn first_bounded_input(&self) -> usize {
        usize::from(self.fixes_action)
    }

    fn bounded_inputs(&self) -> usize {
        self.horizon - self.first_bounded_input()
    }

    fn input_upper(&self, k: usize) -> usize {
        2 * self.horizon * self.n + (k - self.first_bounded_input()) * self.m
    }

    fn input_lower(&self, k: usize) -> usize {
        self.input_upper(k) + self.bounded_inputs() * self.m
    }

    fn slack(&self, k: usize) -> usize {
        2 * self.horizon * self.n + 2 * self.bounded_inputs() * self.m + k * self.n
    }

    pub fn num_ineq(&self) -> usize {
        self.slack(self.horizon)
    }
}

/// Offsets of `x(k)`, `u(k)`, `sigma(k)` inside an agent's own variable block.
#[derive(Clone, Copy, Debug)]
struct Vars {
    n: usize,
    m: usize,
    horizon: usize,
}

impl Vars {
    fn x(&self, k: usize) -> usize {
        k * self.n
    }

    fn u(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + k * self.m
    }

    fn sigma(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m + k * self.n
    }

    fn len(&self) -> usize {
        self.sigma(self.horizon)
    }
}

struct Target<'a> {
    h: &'a mut DMatrix<f64>,
    g: &'a mut DVector<f64>,
    c0: &'a mut f64,
    a_eq: &'a mut DMatrix<f64>,
    b_eq: &'a mut DVector<f64>,
    a_in: &'a mut DMatrix<f64>,
    b_in: &'a mut DVector<f64>,
}

/// Where an agent's block sits and how to find the neighbour states it references.
struct Placement<'a> {
    col: usize,
    eq_row: usize,
    in_row: usize,
    neighbor_col: &'a dyn Fn(usize, usize) -> usize,
}

fn check_request(scheme: &MpcScheme, req: &EvalRequest) -> Result<(), ApproxError> {
    let (n, m, big_m) = (scheme.n(), scheme.m(), scheme.num_agents());
    if req.state.num_agents() != big_m || req.state.states.iter().any(|s| s.len() != n) {
        return Err(ApproxError::Dimension(format!("state must hold {big_m} vectors of length {n}")));
    }
    for list in [req.action, req.tilt].into_iter().flatten() {
        if list.len() != big_m || list.iter().any(|a| a.len() != m) {
            return Err(ApproxError::Dimension(format!("actions must hold {big_m} vectors of length {m}")));
        }
    }
    if let Some(actions) = req.action {
        let c = &scheme.config;
        for (i, a) in actions.iter().enumerate() {
            for r in 0..m {
                if !(a[r] >= c.u_lb[r] - 1e-9 && a[r] <= c.u_ub[r] + 1e-9) {
                    return Err(ApproxError::ActionOutOfBounds { agent: i, value: a[r] });
                }
            }
        }
    }
    Ok(())
}

fn fill_agent(scheme: &MpcScheme, i: usize, req: &EvalRequest, at: &Placement, t: &mut Target) {
    let c = &scheme.config;
    let p = &scheme.params[i];
    let (n, m, nh) = (scheme.n(), scheme.m(), c.horizon);
    let v = Vars { n, m, horizon: nh };
    let rows = AgentRows::new(scheme, req.action.is_some());
    let o = at.col;
    let (e0, i0) = (at.eq_row, at.in_row);

    *t.c0 += p.v0;
    for k in 0..nh {
        let disc = c.gamma.powi(k as i32);
        let lin = if c.discount_linear { disc } else { 1.0 };
        for r in 0..n {
            t.h[(o + v.x(k) + r, o + v.x(k) + r)] += disc;
            t.g[o + v.x(k) + r] += lin * p.f[r];
            t.h[(o + v.sigma(k) + r, o + v.sigma(k) + r)] += 2.0 * c.slack_reg;
            t.g[o + v.sigma(k) + r] += 0.5 * disc * c.omega[r];
        }
        for r in 0..m {
            t.h[(o + v.u(k) + r, o + v.u(k) + r)] += 0.5 * disc;
            t.g[o + v.u(k) + r] += lin * p.f[n + r];
        }
    }
    if let Some(pw) = &c.terminal_weight {
        let xn = o + v.x(nh);
        let mut block = t.h.view_mut((xn, xn), (n, n));
        block += pw;
    }
    if let Some(tilt) = req.tilt {
        for r in 0..m {
            t.g[o + v.u(0) + r] += tilt[i][r];
        }
    }

    for r in 0..n {
        t.a_eq[(e0 + r, o + v.x(0) + r)] = 1.0;
        t.b_eq[e0 + r] = req.state.states[i][r];
    }
    if let Some(actions) = req.action {
        for r in 0..m {
            t.a_eq[(e0 + n + r, o + v.u(0) + r)] = 1.0;
            t.b_eq[e0 + n + r] = actions[i][r].clamp(c.u_lb[r], c.u_ub[r]);
        }
    }
    let dynamics = &p.dynamics;
    for k in 0..nh {
        let row0 = e0 + rows.dynamics(k);
        for r in 0..n {
            let row = row0 + r;
            t.a_eq[(row, o + v.x(k + 1) + r)] = 1.0;
            for cc in 0..n {
                t.a_eq[(row, o + v.x(k) + cc)] -= dynamics.a[(r, cc)];
            }
            for cc in 0..m {
                t.a_eq[(row, o + v.u(k) + cc)] -= dynamics.b[(r, cc)];
            }
            for (&j, aij) in &dynamics.a_neighbors {
                let col = (at.neighbor_col)(j, k);
                for cc in 0..n {
                    t.a_eq[(row, col + cc)] -= aij[(r, cc)];
                }
            }
            t.b_eq[row] = dynamics.offset[r];
        }
    }

    for k in 0..nh {
        for r in 0..n {
            let lo = i0 + rows.lower(k) + r;
            t.a_in[(lo, o + v.x(k) + r)] = -1.0;
            t.a_in[(lo, o + v.sigma(k) + r)] = -1.0;
            t.b_in[lo] = -(c.s_lb[r] + p.x_lb[r]);
            let hi = i0 + rows.upper(k) + r;
            t.a_in[(hi, o + v.x(k) + r)] = 1.0;
            t.a_in[(hi, o + v.sigma(k) + r)] = -1.0;
            t.b_in[hi] = c.s_ub[r] + p.x_ub[r];
            let sl = i0 + rows.slack(k) + r;
            t.a_in[(sl, o + v.sigma(k) + r)] = -1.0;
        }
        if k >= rows.first_bounded_input() {
            for r in 0..m {
                let hi = i0 + rows.input_upper(k) + r;
                t.a_in[(hi, o + v.u(k) + r)] = 1.0;
                t.b_in[hi] = c.u_ub[r];
                let lo = i0 + rows.input_lower(k) + r;
                t.a_in[(lo, o + v.u(k) + r)] = -1.0;
                t.b_in[lo] = -c.u_lb[r];
            }
        }
    }
}

fn extract(
    scheme: &MpcScheme,
    i: usize,
    x: &DVector<f64>,
    col: usize,
    neighbor_col: &dyn Fn(usize, usize) -> usize,
    kkt: &KktSolution,
    rows: (usize, usize, AgentRows),
) -> AgentSolution {
    let (n, m, nh) = (scheme.n(), scheme.m(), scheme.config.horizon);
    let v = Vars { n, m, horizon: nh };
    let (eq0, in0, layout) = rows;
    let xs = (0..=nh).map(|k| x.rows(col + v.x(k), n).into_owned()).collect();
    let us = (0..nh).map(|k| x.rows(col + v.u(k), m).into_owned()).collect();
    let sig = (0..nh).map(|k| x.rows(col + v.sigma(k), n).into_owned()).collect();
    let neighbor_x = scheme
        .topology
        .neighbors(i)
        .iter()
        .map(|&j| (j, (0..nh).map(|k| x.rows(neighbor_col(j, k), n).into_owned()).collect()))
        .collect();
    let in_range = in0..in0 + layout.num_ineq();
    AgentSolution {
        x: xs,
        u: us,
        sigma: sig,
        neighbor_x,
        eq_duals: kkt.eq_duals.rows(eq0, layout.num_eq()).into_owned(),
        ineq_duals: kkt.ineq_duals.rows(in0, layout.num_ineq()).into_owned(),
        kkt_residual: kkt.kkt_residual,
        degenerate: kkt.degenerate.iter().filter(|r| in_range.contains(r)).count(),
    }
}

/// Offsets of each agent's block in the centralised program.
#[derive(Clone, Debug)]
pub(crate) struct CentralLayout {
    pub cols: Vec<usize>,
    pub eq_rows: Vec<usize>,
    pub in_rows: Vec<usize>,
    pub rows: AgentRows,
    pub vars: usize,
}

impl CentralLayout {
    fn new(scheme: &MpcScheme, fixes_action: bool) -> Self {
        let rows = AgentRows::new(scheme, fixes_action);
        let own = Vars { n: scheme.n(), m: scheme.m(), horizon: scheme.config.horizon }.len();
        let big_m = scheme.num_agents();
        Self {
            cols: (0..big_m).map(|i| i * own).collect(),
            eq_rows: (0..big_m).map(|i| i * rows.num_eq()).collect(),
            in_rows: (0..big_m).map(|i| i * rows.num_ineq()).collect(),
            rows,
            vars: big_m * own,
        }
    }

    fn neighbor_col(&self, n: usize) -> impl Fn(usize, usize) -> usize + '_ {
        move |j, k| self.cols[j] + k * n
    }
}

/// The monolithic program over all agents, agents ascending, no copies.
pub fn central_qp(scheme: &MpcScheme, req: &EvalRequest) -> Result<QuadProgram, ApproxError> {
    Ok(central_parts(scheme, req)?.0)
}

pub(crate) fn central_parts(scheme: &MpcScheme, req: &EvalRequest) -> Result<(QuadProgram, CentralLayout), ApproxError> {
    scheme.validate()?;
    check_request(scheme, req)?;
    let layout = CentralLayout::new(scheme, req.action.is_some());
    let big_m = scheme.num_agents();
    let d = layout.vars;
    let (ne, ni) = (big_m * layout.rows.num_eq(), big_m * layout.rows.num_ineq());
    let mut h = DMatrix::zeros(d, d);
    let mut g = DVector::zeros(d);
    let mut c0 = 0.0;
    let mut a_eq = DMatrix::zeros(ne, d);
    let mut b_eq = DVector::zeros(ne);
    let mut a_in = DMatrix::zeros(ni, d);
    let mut b_in = DVector::zeros(ni);
    let neighbor_col = layout.neighbor_col(scheme.n());
    for i in 0..big_m {
        let mut t = Target {
            h: &mut h,
            g: &mut g,
            c0: &mut c0,
            a_eq: &mut a_eq,
            b_eq: &mut b_eq,
            a_in: &mut a_in,
            b_in: &mut b_in,
        };
        let at = Placement { col: layout.cols[i], eq_row: layout.eq_rows[i], in_row: layout.in_rows[i], neighbor_col: &neighbor_col };
        fill_agent(scheme, i, req, &at, &mut t);
    }
    drop(neighbor_col);
    let qp = QuadProgram::new(h, g).with_constant(c0).with_equalities(a_eq, b_eq).with_inequalities(a_in, b_in);
    Ok((qp, layout))
}

pub(crate) fn split_central(
    scheme: &MpcScheme,
    layout: &CentralLayout,
    kkt: &KktSolution,
) -> Vec<AgentSolution> {
    let neighbor_col = layout.neighbor_col(scheme.n());
    (0..scheme.num_agents())
        .map(|i| {
            extract(
                scheme,
                i,
                &kkt.x,
                layout.cols[i],
                &neighbor_col,
                kkt,
                (layout.eq_rows[i], layout.in_rows[i], layout.rows),
            )
        })
        .collect()
}

/// Agent `i`'s ADMM subproblem: own variables plus copies of the neighbours' states
/// `x_j(0..N-1)`, with the penalty `rho/2 |x~|^2` on the shared entries built in.
pub struct LocalQp<'a> {
    scheme: &'a MpcScheme,
    agent: usize,
    factored: FactoredQp,
    g: DVector<f64>,
    c0: f64,
    b_eq: DVector<f64>,
    b_in: DVector<f64>,
    shared: Vec<usize>,
    own_len: usize,
    rows: AgentRows,
    tol: f64,
}

impl<'a> LocalQp<'a> {
    pub fn new(scheme: &'a MpcScheme, agent: usize, req: &EvalRequest, rho: f64, tol: f64) -> Result<Self, ApproxError> {
        check_request(scheme, req)?;
        let (n, nh) = (scheme.n(), scheme.config.horizon);
        let own_len = Vars { n, m: scheme.m(), horizon: nh }.len();
        let neighbors = scheme.topology.neighbors(agent);
        let d = own_len + neighbors.len() * nh * n;
        let rows = AgentRows::new(scheme, req.action.is_some());
        let mut h = DMatrix::zeros(d, d);
        let mut g = DVector::zeros(d);
        let mut c0 = 0.0;
        let mut a_eq = DMatrix::zeros(rows.num_eq(), d);
        let mut b_eq = DVector::zeros(rows.num_eq());
        let mut a_in = DMatrix::zeros(rows.num_ineq(), d);
        let mut b_in = DVector::zeros(rows.num_ineq());
        let neighbor_col = local_neighbor_col(neighbors, own_len, nh, n);
        let mut t = Target {
            h: &mut h,
            g: &mut g,
            c0: &mut c0,
            a_eq: &mut a_eq,
            b_eq: &mut b_eq,
            a_in: &mut a_in,
            b_in: &mut b_in,
        };
        fill_agent(scheme, agent, req, &Placement { col: 0, eq_row: 0, in_row: 0, neighbor_col: &neighbor_col }, &mut t);

        let mut shared = Vec::new();
        if !scheme.topology.copiers(agent).is_empty() {
            shared.extend(0..nh * n);
        }
        shared.extend(own_len..d);
        for &k in &shared {
            h[(k, k)] += rho;
        }
        let factored = FactoredQp::new(&h, &a_eq, &a_in)?;
        Ok(Self { scheme, agent, factored, g, c0, b_eq, b_in, shared, own_len, rows, tol })
    }

    pub fn shared_len(&self) -> usize {
        self.shared.len()
    }

    pub fn min_reduced_eigenvalue(&self) -> f64 {
        self.factored.min_reduced_eigenvalue()
    }

    pub fn dim(&self) -> usize {
        self.factored.dim()
    }
}

fn local_neighbor_col(neighbors: &[usize], own_len: usize, nh: usize, n: usize) -> impl Fn(usize, usize) -> usize + '_ {
    move |j, k| {
        let pos = neighbors.iter().position(|&x| x == j).expect("coupling references a neighbour");
        own_len + pos * nh * n + k * n
    }
}

impl ConsensusSubproblem for LocalQp<'_> {
    type Solution = AgentSolution;

    fn solve(&self, shift: &DVector<f64>) -> Result<(DVector<f64>, AgentSolution), QpError> {
        let mut g = self.g.clone();
        for (&k, s) in self.shared.iter().zip(shift.iter()) {
            g[k] += s;
        }
        let kkt = self.factored.solve(&g, self.c0, &self.b_eq, &self.b_in, self.tol)?;
        let shared = DVector::from_iterator(self.shared.len(), self.shared.iter().map(|&k| kkt.x[k]));
        let (n, nh) = (self.scheme.n(), self.scheme.config.horizon);
        let neighbor_col = local_neighbor_col(self.scheme.topology.neighbors(self.agent), self.own_len, nh, n);
        let sol = extract(self.scheme, self.agent, &kkt.x, 0, &neighbor_col, &kkt, (0, 0, self.rows));
        Ok((shared, sol))
    }

    fn objective(&self, solution: &AgentSolution) -> f64 {
        self.scheme.local_cost(self.agent, solution)
    }
}
