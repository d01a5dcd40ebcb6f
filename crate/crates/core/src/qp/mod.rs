//! Dense strictly convex quadratic programs.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 x' H x + g' x + c0
//!     subject to  Aeq x  = beq
//!                 Aineq x <= bineq
//! ```
//!
//! `H` only needs to be positive definite on the nullspace of `Aeq`. Equalities are
//! eliminated with an orthogonal nullspace basis and the reduced problem is solved with
//! the Goldfarb-Idnani dual active-set method, which returns exact active sets and
//! therefore multipliers accurate to working precision. Multipliers follow the sign
//! convention of the Lagrangian `F(x) + mu'(Aeq x - beq) + lambda'(Aineq x - bineq)`.

mod active_set;
mod factor;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use factor::FactoredQp;

/// KKT tolerance used while learning, where sensitivities need accurate multipliers.
pub const TRAINING_TOL: f64 = 1e-10;
/// KKT tolerance used when only the policy is needed.
pub const DEPLOYMENT_TOL: f64 = 1e-8;
/// Smallest admissible eigenvalue of the reduced Hessian.
pub const CONVEXITY_FLOOR: f64 = 1e-10;
/// A constraint with both slack and multiplier below this is reported as weakly active.
pub const DEGENERACY_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no point satisfies the constraints")]
    Infeasible,
    #[error("reduced Hessian is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotStrictlyConvex { min_eigenvalue: f64 },
    #[error("equality constraints are rank deficient ({rank} of {rows} rows independent)")]
    RankDeficient { rank: usize, rows: usize },
    #[error("solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },
}

#[derive(Clone, Debug)]
pub struct QuadProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QuadProgram {
    /// Unconstrained program `1/2 x'Hx + g'x`.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let d = g.len();
        Self {
            h,
            g,
            c0: 0.0,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, d),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn with_constant(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        if self.h.nrows() != d || self.h.ncols() != d {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {d}x{d}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension(format!(
                "Aeq is {}x{} with {} right-hand sides",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            )));
        }
        if self.a_ineq.ncols() != d || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(QpError::Dimension(format!(
                "Aineq is {}x{} with {} right-hand sides",
                self.a_ineq.nrows(),
                self.a_ineq.ncols(),
                self.b_ineq.len()
            )));
        }
        Ok(())
    }

    /// `1/2 x'Hx + g'x + c0`.
    pub fn objective_value(&self, x: &DVector<f64>) -> Result<f64, QpError> {
        if x.len() != self.dim() {
            return Err(QpError::Dimension(format!(
                "point has length {}, program has {} variables",
                x.len(),
                self.dim()
            )));
        }
        Ok(0.5 * x.dot(&(&self.h * x)) + self.g.dot(x) + self.c0)
    }

    /// Largest violation of the KKT conditions at a primal-dual point.
    pub fn kkt_residual(&self, x: &DVector<f64>, eq_duals: &DVector<f64>, ineq_duals: &DVector<f64>) -> f64 {
        let stationarity = &self.h * x
            + &self.g
            + self.a_eq.tr_mul(eq_duals)
            + self.a_ineq.tr_mul(ineq_duals);
        let mut res = stationarity.amax();
        if self.num_eq() > 0 {
            res = res.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.num_ineq() > 0 {
            let slack = &self.b_ineq - &self.a_ineq * x;
            for (s, l) in slack.iter().zip(ineq_duals.iter()) {
                res = res.max(-s).max(-l).max((s * l).abs());
            }
        }
        res
    }
}

/// Primal-dual solution of a [`QuadProgram`].
#[derive(Clone, Debug)]
pub struct KktSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Inequality rows in the final active set.
    pub active: Vec<usize>,
    /// Inequality rows that are weakly active (slack and multiplier both tiny).
    pub degenerate: Vec<usize>,
    pub iterations: usize,
}

pub fn solve(qp: &QuadProgram, tol: f64) -> Result<KktSolution, QpError> {
    qp.validate()?;
    let factored = FactoredQp::new(&qp.h, &qp.a_eq, &qp.a_ineq)?;
    factored.solve(&qp.g, qp.c0, &qp.b_eq, &qp.b_ineq, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_qp(rng: &mut ChaCha8Rng, d: usize, neq: usize, nineq: usize) -> QuadProgram {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(d, d) * 0.5;
        let g = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let a_eq = DMatrix::from_fn(neq, d, |_, _| rng.random_range(-1.0..1.0));
        let b_eq = DVector::from_fn(neq, |_, _| rng.random_range(-0.5..0.5));
        let a_ineq = DMatrix::from_fn(nineq, d, |_, _| rng.random_range(-1.0..1.0));
        let b_ineq = DVector::from_fn(nineq, |_, _| rng.random_range(-0.2..1.0));
        QuadProgram::new(h, g)
            .with_constant(rng.random_range(-1.0..1.0))
            .with_equalities(a_eq, b_eq)
            .with_inequalities(a_ineq, b_ineq)
    }

    /// Exhaustive active-set enumeration: solve the equality-constrained KKT system for every
    /// subset of inequalities and keep the primal- and dual-feasible candidate.
    fn enumerate_active_sets(qp: &QuadProgram) -> Option<(DVector<f64>, f64)> {
        let d = qp.dim();
        let m = qp.num_ineq();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
            let nc = qp.num_eq() + rows.len();
            let mut kkt = DMatrix::zeros(d + nc, d + nc);
            let mut rhs = DVector::zeros(d + nc);
            kkt.view_mut((0, 0), (d, d)).copy_from(&qp.h);
            rhs.rows_mut(0, d).copy_from(&(-&qp.g));
            for r in 0..qp.num_eq() {
                for c in 0..d {
                    kkt[(d + r, c)] = qp.a_eq[(r, c)];
                    kkt[(c, d + r)] = qp.a_eq[(r, c)];
                }
                rhs[d + r] = qp.b_eq[r];
            }
            for (k, &row) in rows.iter().enumerate() {
                let r = qp.num_eq() + k;
                for c in 0..d {
                    kkt[(d + r, c)] = qp.a_ineq[(row, c)];
                    kkt[(c, d + r)] = qp.a_ineq[(row, c)];
                }
                rhs[d + r] = qp.b_ineq[row];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, d).into_owned();
            let lam = sol.rows(d + qp.num_eq(), rows.len());
            let primal_ok = (&qp.a_ineq * &x - &qp.b_ineq).iter().all(|v| *v <= 1e-9);
            let dual_ok = lam.iter().all(|v| *v >= -1e-9);
            if primal_ok && dual_ok {
                let obj = qp.objective_value(&x).unwrap();
                if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                    best = Some((x, obj));
                }
            }
        }
        best
    }

    #[test]
    fn unconstrained_norm_is_minimized_at_origin() {
        let qp = QuadProgram::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3));
        let sol = solve(&qp, TRAINING_TOL).unwrap();
        assert_eq!(sol.x, DVector::zeros(3));
        assert_eq!(sol.objective, 0.0);
        assert!(sol.eq_duals.is_empty() && sol.ineq_duals.is_empty());
    }

    #[test]
    fn single_bound_multiplier_by_hand() {
        // min (x-1)^2 s.t. x <= 0  ->  x* = 0, lambda* = 2
        let qp = QuadProgram::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -2.0))
            .with_constant(1.0)
            .with_inequalities(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0));
        let sol = solve(&qp, TRAINING_TOL).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.ineq_duals[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-14);
        assert_eq!(sol.active, vec![0]);
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..200 {
            let qp = random_qp(&mut rng, 6, 2, 3);
            let Some((x_ref, obj_ref)) = enumerate_active_sets(&qp) else {
                assert_eq!(solve(&qp, TRAINING_TOL).unwrap_err(), QpError::Infeasible);
                continue;
            };
            let sol = solve(&qp, TRAINING_TOL).unwrap();
            assert!((&sol.x - &x_ref).amax() < 1e-8, "{} vs {}", sol.x, x_ref);
            assert!((sol.objective - obj_ref).abs() < 1e-8);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn objective_value_basics() {
        let qp = QuadProgram::new(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2)).with_constant(0.75);
        assert_eq!(qp.objective_value(&DVector::zeros(2)).unwrap(), 0.75);
        assert_eq!(qp.objective_value(&DVector::from_vec(vec![1.0, 0.0])).unwrap(), 1.75);
        assert!(matches!(qp.objective_value(&DVector::zeros(3)), Err(QpError::Dimension(_))));
    }

    #[test]
    fn objective_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qp = random_qp(&mut rng, 5, 0, 0);
        let x = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let grad = &qp.h * &x + &qp.g;
        let h = 1e-5;
        for k in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (qp.objective_value(&xp).unwrap() - qp.objective_value(&xm).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn infeasible_box_is_reported() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]); // x <= -1 and x >= 1
        let qp = QuadProgram::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(a, b);
        assert_eq!(solve(&qp, TRAINING_TOL).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn indefinite_on_nullspace_is_rejected() {
        let mut h = DMatrix::identity(2, 2);
        h[(1, 1)] = -1.0;
        let qp = QuadProgram::new(h, DVector::zeros(2));
        assert!(matches!(solve(&qp, TRAINING_TOL), Err(QpError::NotStrictlyConvex { .. })));
        // Same Hessian but the negative direction is pinned by an equality.
        let mut h = DMatrix::identity(2, 2);
        h[(1, 1)] = 0.0;
        let qp = QuadProgram::new(h, DVector::from_vec(vec![1.0, 1.0]))
            .with_equalities(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), DVector::from_element(1, 3.0));
        let sol = solve(&qp, TRAINING_TOL).unwrap();
        assert_abs_diff_eq!(sol.x[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.x[1], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.eq_duals[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn dependent_equalities_are_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let qp = QuadProgram::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .with_equalities(a, DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(solve(&qp, TRAINING_TOL), Err(QpError::RankDeficient { rank: 1, rows: 2 })));
    }

    #[test]
    fn weakly_active_constraint_is_flagged() {
        // min x^2 s.t. x <= 0: optimum on the boundary with a zero multiplier.
        let qp = QuadProgram::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_inequalities(DMatrix::identity(1, 1), DVector::zeros(1));
        let sol = solve(&qp, TRAINING_TOL).unwrap();
        assert_eq!(sol.degenerate, vec![0]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn kkt_conditions_hold(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let qp = random_qp(&mut rng, 8, 2, 10);
                if let Ok(sol) = solve(&qp, TRAINING_TOL) {
                    prop_assert!(sol.ineq_duals.iter().all(|l| *l >= -1e-9));
                    prop_assert!(sol.kkt_residual <= TRAINING_TOL);
                    let slack = &qp.b_ineq - &qp.a_ineq * &sol.x;
                    for (s, l) in slack.iter().zip(sol.ineq_duals.iter()) {
                        prop_assert!((s * l).abs() <= TRAINING_TOL);
                    }
                }
            }

            #[test]
            fn row_scaling_rescales_multiplier(seed in 0u64..10_000, scale in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let qp = random_qp(&mut rng, 6, 1, 6);
                if let Ok(base) = solve(&qp, TRAINING_TOL) {
                    let row = (seed % 6) as usize;
                    let mut scaled = qp.clone();
                    for c in 0..scaled.dim() {
                        scaled.a_ineq[(row, c)] *= scale;
                    }
                    scaled.b_ineq[row] *= scale;
                    let sol = solve(&scaled, TRAINING_TOL).unwrap();
                    prop_assert!((&sol.x - &base.x).amax() < 1e-8);
                    prop_assert!((sol.ineq_duals[row] * scale - base.ineq_duals[row]).abs() < 1e-7 * (1.0 + base.ineq_duals[row].abs()));
                }
            }

            #[test]
            fn tighter_tolerance_never_worsens_objective(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let qp = random_qp(&mut rng, 7, 2, 8);
                if let (Ok(loose), Ok(tight)) = (solve(&qp, DEPLOYMENT_TOL), solve(&qp, TRAINING_TOL)) {
                    prop_assert!(tight.objective <= loose.objective + DEPLOYMENT_TOL);
                }
            }
        }
    }
}
