use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{active_set, KktSolution, QpError, CONVEXITY_FLOOR, DEGENERACY_TOL};

/// Factorisation of the data of a [`super::QuadProgram`] that does not change between
/// solves: Hessian, constraint matrices. Linear term and right-hand sides are supplied per
/// solve, which is what repeated ADMM subproblems need.
#[derive(Clone, Debug)]
pub struct FactoredQp {
    h: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    a_ineq: DMatrix<f64>,
    /// Orthonormal basis of range(Aeq') and the triangular factor: Aeq' = Q1 R.
    range_basis: DMatrix<f64>,
    range_r: DMatrix<f64>,
    /// Orthonormal basis of null(Aeq).
    null_basis: DMatrix<f64>,
    /// L^{-T} for the reduced Hessian Z'HZ = L L'.
    chol_inv_t: DMatrix<f64>,
    /// Reduced inequality normals in `>=` form: -Aineq Z.
    normals: DMatrix<f64>,
    min_eigenvalue: f64,
}

impl FactoredQp {
    pub fn new(h: &DMatrix<f64>, a_eq: &DMatrix<f64>, a_ineq: &DMatrix<f64>) -> Result<Self, QpError> {
        let d = h.nrows();
        if h.ncols() != d || a_eq.ncols() != d || a_ineq.ncols() != d {
            return Err(QpError::Dimension("constraint matrices must have one column per variable".into()));
        }
        let p = a_eq.nrows();
        if p > d {
            return Err(QpError::RankDeficient { rank: d, rows: p });
        }
        let (range_basis, range_r, null_basis) = if p == 0 {
            (DMatrix::zeros(d, 0), DMatrix::zeros(0, 0), DMatrix::identity(d, d))
        } else {
            // QR of [Aeq' | I] yields a full orthogonal Q whose leading p columns span range(Aeq').
            let mut aug = DMatrix::zeros(d, p + d);
            aug.view_mut((0, 0), (d, p)).copy_from(&a_eq.transpose());
            aug.view_mut((0, p), (d, d)).fill_with_identity();
            let qr = aug.qr();
            let q = qr.q();
            let r = qr.r();
            let range_r = r.view((0, 0), (p, p)).into_owned();
            let scale = range_r.diagonal().amax().max(f64::MIN_POSITIVE);
            let rank = range_r.diagonal().iter().filter(|v| v.abs() > 1e-12 * scale).count();
            if rank < p {
                return Err(QpError::RankDeficient { rank, rows: p });
            }
            (q.columns(0, p).into_owned(), range_r, q.columns(p, d - p).into_owned())
        };
        let nr = d - p;
        let reduced = null_basis.tr_mul(&(h * &null_basis));
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let min_eigenvalue = if nr == 0 {
            f64::INFINITY
        } else {
            SymmetricEigen::new(reduced.clone()).eigenvalues.min()
        };
        if min_eigenvalue <= CONVEXITY_FLOOR {
            return Err(QpError::NotStrictlyConvex { min_eigenvalue });
        }
        let chol = reduced
            .cholesky()
            .ok_or(QpError::NotStrictlyConvex { min_eigenvalue })?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(nr, nr))
            .ok_or(QpError::NotStrictlyConvex { min_eigenvalue })?;
        let normals = -(a_ineq * &null_basis);
        Ok(Self {
            h: h.clone(),
            a_eq: a_eq.clone(),
            a_ineq: a_ineq.clone(),
            range_basis,
            range_r,
            null_basis,
            chol_inv_t: l_inv.transpose(),
            normals,
            min_eigenvalue,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn min_reduced_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn solve(
        &self,
        g: &DVector<f64>,
        c0: f64,
        b_eq: &DVector<f64>,
        b_ineq: &DVector<f64>,
        tol: f64,
    ) -> Result<KktSolution, QpError> {
        let d = self.dim();
        if g.len() != d || b_eq.len() != self.a_eq.nrows() || b_ineq.len() != self.a_ineq.nrows() {
            return Err(QpError::Dimension("right-hand sides do not match the factorised program".into()));
        }
        // particular solution of Aeq x = beq with minimum norm
        let x_p = match self.range_r.tr_solve_upper_triangular(b_eq) {
            Some(v) => &self.range_basis * v,
            None => return Err(QpError::RankDeficient { rank: 0, rows: b_eq.len() }),
        };
        let linear = self.null_basis.tr_mul(&(&self.h * &x_p + g));
        let bounds = -(b_ineq - &self.a_ineq * &x_p);
        let max_iter = 50 * (self.normals.nrows() + self.null_basis.ncols() + 10);
        let dual = active_set::solve(&self.chol_inv_t, &linear, &self.normals, &bounds, max_iter)?;

        let mut x = &x_p + &self.null_basis * &dual.w;
        let mut ineq_duals = DVector::zeros(b_ineq.len());
        for (&k, &v) in dual.active.iter().zip(&dual.multipliers) {
            ineq_duals[k] = v;
        }
        let mut eq_duals = self.recover_eq_duals(&x, g, &ineq_duals);
        let mut kkt_residual = self.kkt_residual(&x, g, b_eq, b_ineq, &eq_duals, &ineq_duals);
        if kkt_residual > tol {
            if let Some((rx, rmu, rlam)) = self.refine(g, b_eq, b_ineq, &dual.active) {
                let res = self.kkt_residual(&rx, g, b_eq, b_ineq, &rmu, &rlam);
                if res < kkt_residual {
                    (x, eq_duals, ineq_duals, kkt_residual) = (rx, rmu, rlam, res);
                }
            }
        }

        let objective = 0.5 * x.dot(&(&self.h * &x)) + g.dot(&x) + c0;
        if kkt_residual > tol || !kkt_residual.is_finite() {
            return Err(QpError::MaxIterations { iterations: dual.iterations, residual: kkt_residual });
        }
        let slack = b_ineq - &self.a_ineq * &x;
        let degenerate = (0..b_ineq.len())
            .filter(|&k| slack[k].abs() < DEGENERACY_TOL && ineq_duals[k].abs() < DEGENERACY_TOL)
            .collect();
        Ok(KktSolution {
            x,
            eq_duals,
            ineq_duals,
            objective,
            kkt_residual,
            active: dual.active,
            degenerate,
            iterations: dual.iterations,
        })
    }

    /// Direct solve of the KKT system with the active rows held as equalities. Updates in the
    /// dual method accumulate rounding that this removes.
    fn refine(
        &self,
        g: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_ineq: &DVector<f64>,
        active: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let (d, p, na) = (self.dim(), self.a_eq.nrows(), active.len());
        let n = d + p + na;
        let mut kkt = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        kkt.view_mut((0, 0), (d, d)).copy_from(&self.h);
        rhs.rows_mut(0, d).copy_from(&(-g));
        for r in 0..p {
            for c in 0..d {
                kkt[(d + r, c)] = self.a_eq[(r, c)];
                kkt[(c, d + r)] = self.a_eq[(r, c)];
            }
            rhs[d + r] = b_eq[r];
        }
        for (e, &k) in active.iter().enumerate() {
            for c in 0..d {
                kkt[(d + p + e, c)] = self.a_ineq[(k, c)];
                kkt[(c, d + p + e)] = self.a_ineq[(k, c)];
            }
            rhs[d + p + e] = b_ineq[k];
        }
        let mut z = kkt.clone().lu().solve(&rhs)?;
        // one step of iterative refinement
        let correction = kkt.clone().lu().solve(&(&rhs - &kkt * &z))?;
        z += correction;
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut lam = DVector::zeros(b_ineq.len());
        for (e, &k) in active.iter().enumerate() {
            lam[k] = z[d + p + e];
        }
        Some((z.rows(0, d).into_owned(), z.rows(d, p).into_owned(), lam))
    }

    /// Least-squares solution of `Aeq' mu = -(Hx + g + Aineq' lambda)`.
    fn recover_eq_duals(&self, x: &DVector<f64>, g: &DVector<f64>, ineq_duals: &DVector<f64>) -> DVector<f64> {
        if self.a_eq.nrows() == 0 {
            return DVector::zeros(0);
        }
        let resid = &self.h * x + g + self.a_ineq.tr_mul(ineq_duals);
        let proj = -self.range_basis.tr_mul(&resid);
        self.range_r
            .solve_upper_triangular(&proj)
            .expect("range factor checked nonsingular at construction")
    }

    fn kkt_residual(
        &self,
        x: &DVector<f64>,
        g: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_ineq: &DVector<f64>,
        eq_duals: &DVector<f64>,
        ineq_duals: &DVector<f64>,
    ) -> f64 {
        let stationarity = &self.h * x + g + self.a_eq.tr_mul(eq_duals) + self.a_ineq.tr_mul(ineq_duals);
        let mut res = stationarity.amax();
        if !b_eq.is_empty() {
            res = res.max((&self.a_eq * x - b_eq).amax());
        }
        let slack = b_ineq - &self.a_ineq * x;
        for (s, l) in slack.iter().zip(ineq_duals.iter()) {
            res = res.max(-s).max(-l).max((s * l).abs());
        }
        res
    }
}
