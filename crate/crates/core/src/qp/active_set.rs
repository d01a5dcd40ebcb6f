//! Goldfarb-Idnani dual active-set iterations for
//! `min 1/2 w'Gw + a'w  s.t.  n_k' w >= b_k`, with `G` given through `J0 = L^{-T}`.
//!
//! The factorisation `L^{-1} N_A = Q [R; 0]` of the active normals is kept as
//! `J = L^{-T} Q` and the upper-triangular `R`; both are updated with Givens rotations.

use nalgebra::{DMatrix, DVector};

use super::QpError;

pub(crate) struct DualSolution {
    pub w: DVector<f64>,
    /// Active constraint indices and their (nonnegative) multipliers.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

struct Factorization {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factorization {
    fn n(&self) -> usize {
        self.j.nrows()
    }

    /// Append a constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = self.n();
        let q = self.q;
        for jj in (q + 1..n).rev() {
            let (a, b) = (d[jj - 1], d[jj]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[jj - 1] = h;
            d[jj] = 0.0;
            rotate_columns(&mut self.j, jj - 1, jj, c, s);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.q += 1;
    }

    /// Remove the constraint at position `l` of the active ordering.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        for k in l..q - 1 {
            for row in 0..=k + 1 {
                self.r[(row, k)] = self.r[(row, k + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for jj in l..q - 1 {
            let (a, b) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for k in jj..q - 1 {
                let (x, y) = (self.r[(jj, k)], self.r[(jj + 1, k)]);
                self.r[(jj, k)] = c * x + s * y;
                self.r[(jj + 1, k)] = -s * x + c * y;
            }
            self.r[(jj + 1, jj)] = 0.0;
            rotate_columns(&mut self.j, jj, jj + 1, c, s);
        }
        self.q -= 1;
    }

    /// Solve `R x = rhs` on the leading `q` block.
    fn solve_r(&self, rhs: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut x = rhs.to_vec();
        for i in (0..q).rev() {
            let mut acc = x[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * x[k];
            }
            x[i] = acc / self.r[(i, i)];
        }
        x
    }

    /// Solve `R' x = rhs` on the leading `q` block.
    fn solve_rt(&self, rhs: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut x = rhs.to_vec();
        for i in 0..q {
            let mut acc = x[i];
            for k in 0..i {
                acc -= self.r[(k, i)] * x[k];
            }
            x[i] = acc / self.r[(i, i)];
        }
        x
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    let n = m.nrows();
    let (left, right) = m.as_mut_slice().split_at_mut(b * n);
    let ca = &mut left[a * n..(a + 1) * n];
    let cb = &mut right[..n];
    for (x, y) in ca.iter_mut().zip(cb.iter_mut()) {
        let (u, v) = (*x, *y);
        *x = c * u + s * v;
        *y = -s * u + c * v;
    }
}

/// Columns `lo..hi` of `J` times `coef`.
fn combine_columns(j: &DMatrix<f64>, lo: usize, hi: usize, coef: &[f64]) -> DVector<f64> {
    let n = j.nrows();
    let mut out = DVector::zeros(n);
    for (c, &k) in (lo..hi).zip(coef) {
        if k != 0.0 {
            out.axpy(k, &j.column(c), 1.0);
        }
    }
    out
}

pub(crate) fn solve(
    j0: &DMatrix<f64>,
    linear: &DVector<f64>,
    normals: &DMatrix<f64>,
    bounds: &DVector<f64>,
    max_iterations: usize,
) -> Result<DualSolution, QpError> {
    let n = j0.nrows();
    let m = normals.nrows();
    let mut fac = Factorization { j: j0.clone(), r: DMatrix::zeros(n.max(1), n.max(1)), q: 0 };
    // unconstrained minimiser -J J' a
    let jta = j0.tr_mul(linear);
    let mut w = -(j0 * &jta);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let row_scale: Vec<f64> = (0..m).map(|k| normals.row(k).amax().max(bounds[k].abs()).max(1.0)).collect();
    let mut iterations = 0;
    let mut refreshes = 0;

    loop {
        // pick the most violated inactive constraint
        let values = normals * &w - bounds;
        let mut pick = None;
        let mut worst = 0.0;
        for k in 0..m {
            if is_active[k] {
                continue;
            }
            let v = values[k] / row_scale[k];
            if v < -1e-13 && v < worst {
                worst = v;
                pick = Some(k);
            }
        }
        let Some(p) = pick else {
            // Accept only if the iterate recomputed from the factorisation is also feasible.
            let exact = recompute(&fac, linear, &active, bounds);
            if refreshes < 3 && (normals * &exact - bounds).iter().zip(&row_scale).zip(&is_active).any(|((v, s), a)| !a && v / s < -1e-13) {
                refreshes += 1;
                w = exact;
                continue;
            }
            // Recomputed multipliers can turn negative where the updates kept them at zero;
            // release the worst such row and resume from the exact iterate.
            let exact_u = multipliers(&fac, linear, &active, bounds);
            let scale = exact_u.iter().fold(1.0, |a: f64, v| a.max(v.abs()));
            let negative = exact_u.iter().enumerate().filter(|(_, v)| **v < -1e-12 * scale).min_by(|a, b| a.1.total_cmp(b.1));
            if let (Some((l, _)), true) = (negative, refreshes < 3 + m) {
                refreshes += 1;
                is_active[active.remove(l)] = false;
                fac.drop(l);
                u = multipliers(&fac, linear, &active, bounds).into_iter().map(|v| v.max(0.0)).collect();
                w = recompute(&fac, linear, &active, bounds);
                continue;
            }
            break;
        };
        let np = normals.row(p).transpose();
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::MaxIterations { iterations, residual: f64::NAN });
            }
            let q = fac.q;
            let d = fac.j.tr_mul(&np);
            let d2_norm2: f64 = d.rows(q, n - q).norm_squared();
            let dependent = d2_norm2.sqrt() <= 1e-12 * d.norm().max(f64::MIN_POSITIVE);
            let z = if dependent {
                DVector::zeros(n)
            } else {
                combine_columns(&fac.j, q, n, &d.as_slice()[q..])
            };
            let r = fac.solve_r(&d.as_slice()[..q]);

            // partial step: largest dual step keeping active multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-14 {
                    let ratio = u_plus[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            // full step: makes constraint p active
            let slack_p = np.dot(&w) - bounds[p];
            let t2 = if dependent { f64::INFINITY } else { -slack_p / d2_norm2 };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for (k, rk) in r.iter().enumerate() {
                u_plus[k] -= t * rk;
            }
            u_plus[q] += t;
            if t2.is_finite() {
                w.axpy(t, &z, 1.0);
            }
            if t2 <= t1 {
                fac.add(d);
                active.push(p);
                is_active[p] = true;
                u = u_plus;
                break;
            }
            let l = drop_at.expect("finite partial step has a blocking constraint");
            u_plus.remove(l);
            is_active[active.remove(l)] = false;
            fac.drop(l);
        }
    }

    // Recompute the iterate from the final factorisation instead of the accumulated steps.
    let w = recompute(&fac, linear, &active, bounds);
    let multipliers = multipliers(&fac, linear, &active, bounds);

    Ok(DualSolution { w, active, multipliers, iterations })
}

fn multipliers(fac: &Factorization, linear: &DVector<f64>, active: &[usize], bounds: &DVector<f64>) -> Vec<f64> {
    let jta = fac.j.tr_mul(linear);
    let v1 = fac.solve_rt(&active.iter().map(|&k| bounds[k]).collect::<Vec<_>>());
    let rhs: Vec<f64> = (0..fac.q).map(|k| v1[k] + jta[k]).collect();
    fac.solve_r(&rhs)
}

fn recompute(fac: &Factorization, linear: &DVector<f64>, active: &[usize], bounds: &DVector<f64>) -> DVector<f64> {
    let (q, n) = (fac.q, fac.j.nrows());
    let b_active: Vec<f64> = active.iter().map(|&k| bounds[k]).collect();
    let jta = fac.j.tr_mul(linear);
    let v1 = fac.solve_rt(&b_active);
    let mut w = combine_columns(&fac.j, 0, q, &v1);
    let neg: Vec<f64> = jta.as_slice()[q..].iter().map(|v| -v).collect();
    w += combine_columns(&fac.j, q, n, &neg);
    w
}
