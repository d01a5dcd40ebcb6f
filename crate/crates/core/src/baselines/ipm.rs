//! Mehrotra predictor-corrector interior point method for soft-constrained QPs of the form
//!
//! ```text
//! min 1/2 u'Qu + c'u + sum_j (w_j s_j + r_j s_j^2)
//! s.t. a_k'u - s_{idx(k)} <= b_k,   s >= 0
//! ```
//!
//! where each row references at most one slack. Slacks are eliminated from every Newton
//! system, leaving a dense solve in `u` only.

use nalgebra::{DMatrix, DVector};

use crate::qp::QpError;

#[derive(Clone, Debug)]
pub struct SoftQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub slack_weight: DVector<f64>,
    pub slack_reg: DVector<f64>,
    /// Row `k` is `a[k, :]`.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub slack_of_row: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct SoftSolution {
    pub u: DVector<f64>,
    pub slack: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

const MAX_ITER: usize = 100;

impl SoftQp {
    pub fn num_inputs(&self) -> usize {
        self.c.len()
    }

    pub fn num_slacks(&self) -> usize {
        self.slack_weight.len()
    }

    pub fn objective(&self, u: &DVector<f64>, s: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.q * u))
            + self.c.dot(u)
            + self.slack_weight.dot(s)
            + s.iter().zip(self.slack_reg.iter()).map(|(s, r)| r * s * s).sum::<f64>()
    }

    /// Row residuals `a u - E s - b` followed by `-s`.
    fn constraint(&self, u: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        let rows = self.b.len();
        let mut out = DVector::zeros(rows + s.len());
        let au = &self.a * u;
        for k in 0..rows {
            out[k] = au[k] - self.b[k] - self.slack_of_row[k].map_or(0.0, |j| s[j]);
        }
        for j in 0..s.len() {
            out[rows + j] = -s[j];
        }
        out
    }

    /// `C' y` split into the input and slack parts.
    fn transpose_apply(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let rows = self.b.len();
        let gu = self.a.tr_mul(&y.rows(0, rows).into_owned());
        let mut gs = -y.rows(rows, self.num_slacks()).into_owned();
        for k in 0..rows {
            if let Some(j) = self.slack_of_row[k] {
                gs[j] -= y[k];
            }
        }
        (gu, gs)
    }

    pub fn solve(&self, tol: f64) -> Result<SoftSolution, QpError> {
        let (nu, ns, rows) = (self.num_inputs(), self.num_slacks(), self.b.len());
        if self.q.shape() != (nu, nu)
            || self.a.shape() != (rows, nu)
            || self.slack_of_row.len() != rows
            || self.slack_reg.len() != ns
            || self.slack_of_row.iter().flatten().any(|&j| j >= ns)
        {
            return Err(QpError::Dimension("inconsistent soft QP data".into()));
        }
        let total = rows + ns;
        let mut u = DVector::zeros(nu);
        let mut last_res = f64::INFINITY;
        let mut s = DVector::zeros(ns);
        let g0 = self.constraint(&u, &s);
        let mut t = g0.map(|v| (-v).max(1.0));
        let mut lam = DVector::from_element(total, 1.0);
        let scale = 1.0 + self.c.amax().max(self.b.amax()).max(self.slack_weight.amax());

        for it in 0..MAX_ITER {
            let (cu, cs) = self.transpose_apply(&lam);
            let rd_u = &self.q * &u + &self.c + cu;
            let rd_s = DVector::from_fn(ns, |j, _| self.slack_weight[j] + 2.0 * self.slack_reg[j] * s[j]) + cs;
            let rp = self.constraint(&u, &s) + &t;
            let mu = t.dot(&lam) / total as f64;
            let res = rd_u.amax().max(rd_s.amax()).max(rp.amax());
            last_res = res.max(mu);
            if mu <= tol {
                // Rounding in the reduced Newton system can stall the residual near the
                // tolerance, the verified active-set solve does not suffer from it.
                let active: Vec<bool> = t.iter().zip(lam.iter()).map(|(t, l)| t < l).collect();
                if let Some((u, s)) = self.polish(&active, tol * scale) {
                    return Ok(SoftSolution { objective: self.objective(&u, &s), u, slack: s, iterations: it });
                }
                if res <= tol * scale {
                    return Ok(SoftSolution { objective: self.objective(&u, &s), u, slack: s, iterations: it });
                }
            }
            if !res.is_finite() || !mu.is_finite() {
                return Err(QpError::MaxIterations { iterations: it, residual: res });
            }

            let d = lam.component_div(&t);
            let system = NewtonSystem::new(self, &d)?;

            let solve_dir = |rc: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
                // (P + C'DC) dz = -rd - C'D rp + C' T^-1 rc
                let y = d.component_mul(&rp) - rc.component_div(&t);
                let (yu, ys) = self.transpose_apply(&y);
                let rhs_u = -&rd_u - yu;
                let rhs_s = -&rd_s - ys;
                let (du, ds) = system.solve(&rhs_u, &rhs_s);
                let cdz = self.direction_constraint(&du, &ds);
                let dlam = d.component_mul(&(&cdz + &rp)) - rc.component_div(&t);
                let dt = -(rc + t.component_mul(&dlam)).component_div(&lam);
                (du, ds, dt, dlam)
            };

            let rc_aff = t.component_mul(&lam);
            let (_, _, dt_a, dl_a) = solve_dir(&rc_aff);
            let a_aff = step_to_boundary(&t, &dt_a).min(step_to_boundary(&lam, &dl_a));
            let mu_aff = (&t + &dt_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / total as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let rc = rc_aff + dt_a.component_mul(&dl_a) - DVector::from_element(total, sigma * mu);
            let step = |rc: &DVector<f64>| {
                let (du, ds, dt, dlam) = solve_dir(rc);
                let alpha = (0.995 * step_to_boundary(&t, &dt).min(step_to_boundary(&lam, &dlam))).min(1.0);
                let mu_new = (&t + &dt * alpha).dot(&(&lam + &dlam * alpha)) / total as f64;
                (du, ds, dt, dlam, alpha, mu_new)
            };
            let mut next = step(&rc);
            // The second-order correction can stall the complementarity gap; fall back to a
            // plain centred Newton step when it does not make progress.
            if next.5 > (1.0 - 0.01 * next.4) * mu {
                let centred = t.component_mul(&lam) - DVector::from_element(total, 0.1 * mu);
                let plain = step(&centred);
                if plain.5 < next.5 {
                    next = plain;
                }
            }
            let (du, ds, dt, dlam, alpha, _) = next;
            u += du * alpha;
            s += ds * alpha;
            t += dt * alpha;
            lam += dlam * alpha;
        }
        Err(QpError::MaxIterations { iterations: MAX_ITER, residual: last_res })
    }

    /// Solve the equality-constrained problem on a guessed active set and keep the result only
    /// if it is a KKT point of the full problem. Interior iterates approach degenerate bounds
    /// slowly, this recovers the vertex exactly.
    fn polish(&self, active: &[bool], tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let (nu, ns, rows) = (self.num_inputs(), self.num_slacks(), self.b.len());
        let mut referenced: Vec<Vec<usize>> = vec![Vec::new(); ns];
        for k in (0..rows).filter(|&k| active[k]) {
            if let Some(j) = self.slack_of_row[k] {
                referenced[j].push(k);
            }
        }
        // A slack is pinned at zero, defined by its single active row, or kept as an unknown
        // when several active rows share it.
        enum Slack {
            Zero,
            Row(usize),
            Var(usize),
        }
        let mut kinds = Vec::with_capacity(ns);
        let mut extra = 0;
        for j in 0..ns {
            kinds.push(match referenced[j][..] {
                _ if active[rows + j] => Slack::Zero,
                [] => return None,
                [k] => Slack::Row(k),
                _ => {
                    extra += 1;
                    Slack::Var(nu + extra - 1)
                }
            });
        }
        let nv = nu + extra;
        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        h.view_mut((0, 0), (nu, nu)).copy_from(&self.q);
        g.rows_mut(0, nu).copy_from(&self.c);
        let mut equalities: Vec<(usize, Option<usize>)> =
            (0..rows).filter(|&k| active[k] && self.slack_of_row[k].is_none()).map(|k| (k, None)).collect();
        for (j, kind) in kinds.iter().enumerate() {
            match *kind {
                Slack::Zero => equalities.extend(referenced[j].iter().map(|&k| (k, None))),
                Slack::Row(k) => {
                    // s_j = a_k u - b_k
                    let a = self.a.row(k).transpose();
                    let mut block = h.view_mut((0, 0), (nu, nu));
                    block += &a * a.transpose() * (2.0 * self.slack_reg[j]);
                    let mut head = g.rows_mut(0, nu);
                    head += &a * (self.slack_weight[j] - 2.0 * self.slack_reg[j] * self.b[k]);
                }
                Slack::Var(v) => {
                    h[(v, v)] = 2.0 * self.slack_reg[j];
                    g[v] = self.slack_weight[j];
                    equalities.extend(referenced[j].iter().map(|&k| (k, Some(v))));
                }
            }
        }
        let ne = equalities.len();
        let mut kkt = DMatrix::zeros(nv + ne, nv + ne);
        let mut rhs = DVector::zeros(nv + ne);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
        rhs.rows_mut(0, nv).copy_from(&(-&g));
        for (e, &(k, var)) in equalities.iter().enumerate() {
            for c in 0..nu {
                kkt[(nv + e, c)] = self.a[(k, c)];
                kkt[(c, nv + e)] = self.a[(k, c)];
            }
            if let Some(v) = var {
                kkt[(nv + e, v)] = -1.0;
                kkt[(v, nv + e)] = -1.0;
            }
            rhs[nv + e] = self.b[k];
        }
        // Scenario copies repeat rows, so the system is singular in the multipliers.
        let z = kkt.clone().svd(true, true).solve(&rhs, 1e-12 * kkt.amax()).ok()?;
        if !z.iter().all(|v| v.is_finite()) || (&kkt * &z - &rhs).amax() > tol {
            return None;
        }
        let u = z.rows(0, nu).into_owned();
        let mult = z.rows(nv, ne);
        if mult.iter().any(|&m| m < -tol) {
            return None;
        }
        let au = &self.a * &u;
        let s = DVector::from_fn(ns, |j, _| match kinds[j] {
            Slack::Zero => 0.0,
            Slack::Row(k) => au[k] - self.b[k],
            Slack::Var(v) => z[v],
        });
        let mut row_mult = vec![0.0; rows];
        for (e, &(k, _)) in equalities.iter().enumerate() {
            row_mult[k] = mult[e];
        }
        for (j, kind) in kinds.iter().enumerate() {
            if matches!(kind, Slack::Zero) {
                let used: f64 = referenced[j].iter().map(|&k| row_mult[k]).sum();
                if self.slack_weight[j] - used < -tol {
                    return None;
                }
            }
        }
        (self.constraint(&u, &s).max() <= tol).then_some((u, s))
    }

    fn direction_constraint(&self, du: &DVector<f64>, ds: &DVector<f64>) -> DVector<f64> {
        let rows = self.b.len();
        let mut out = DVector::zeros(rows + ds.len());
        let adu = &self.a * du;
        for k in 0..rows {
            out[k] = adu[k] - self.slack_of_row[k].map_or(0.0, |j| ds[j]);
        }
        for j in 0..ds.len() {
            out[rows + j] = -ds[j];
        }
        out
    }
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0, f64::min)
}

/// `P + C'DC` with the slack block eliminated.
struct NewtonSystem {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    coupling: DMatrix<f64>,
    diag: DVector<f64>,
}

impl NewtonSystem {
    fn new(qp: &SoftQp, d: &DVector<f64>) -> Result<Self, QpError> {
        let (nu, ns, rows) = (qp.num_inputs(), qp.num_slacks(), qp.b.len());
        let dr = d.rows(0, rows);
        let mut scaled = qp.a.clone();
        for k in 0..rows {
            scaled.row_mut(k).scale_mut(dr[k]);
        }
        let mut k_uu = &qp.q + qp.a.tr_mul(&scaled);
        let mut coupling = DMatrix::zeros(ns, nu);
        let mut diag = DVector::from_fn(ns, |j, _| 2.0 * qp.slack_reg[j] + d[rows + j]);
        for k in 0..rows {
            if let Some(j) = qp.slack_of_row[k] {
                let mut row = coupling.row_mut(j);
                row -= scaled.row(k);
                diag[j] += dr[k];
            }
        }
        let mut weighted = coupling.clone();
        for j in 0..ns {
            weighted.row_mut(j).scale_mut(1.0 / diag[j]);
        }
        k_uu -= coupling.tr_mul(&weighted);
        // Eliminating slacks cancels large terms late in the iteration; retry with a growing
        // diagonal shift when the Schur complement loses definiteness to rounding.
        let scale = k_uu.diagonal().amax().max(1.0);
        for shift in [0.0, 1e-14, 1e-12, 1e-10] {
            let mut k = k_uu.clone();
            for r in 0..nu {
                k[(r, r)] += shift * scale;
            }
            if let Some(chol) = k.cholesky() {
                return Ok(Self { chol, coupling, diag });
            }
        }
        Err(QpError::NotStrictlyConvex { min_eigenvalue: f64::NAN })
    }

    fn solve(&self, rhs_u: &DVector<f64>, rhs_s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let scaled = rhs_s.component_div(&self.diag);
        let du = self.chol.solve(&(rhs_u - self.coupling.tr_mul(&scaled)));
        let ds = (rhs_s - &self.coupling * &du).component_div(&self.diag);
        (du, ds)
    }
}
