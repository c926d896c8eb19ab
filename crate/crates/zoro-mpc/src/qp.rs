//! Dense strictly convex QP solver.
//!
//! Solves `min 1/2 x'Hx + g'x  s.t.  Cx <= d` with `H` positive definite by
//! the dual active-set method of Goldfarb and Idnani: start at the
//! unconstrained minimum, repeatedly add the most violated constraint, and
//! take mixed primal/dual steps that keep the working-set multipliers
//! nonnegative. Dual feasibility is maintained throughout, so termination
//! yields the exact active set and multipliers — which downstream
//! suboptimality diagnostics depend on.
//!
//! Dense linear algebra with full re-solves per step; intended for
//! horizon-sized condensed problems (tens of variables, a few hundred rows),
//! not large-scale use.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Constraint violations above this trigger an active-set change.
const VIOLATION_TOL: f64 = 1e-10;
/// Curvature `z'n` below this means the new normal is dependent on the
/// working set.
const CURVATURE_TOL: f64 = 1e-13;
/// Dual direction entries above this can block the step.
const DUAL_DIR_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DenseQp {
    /// n x n symmetric positive definite.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// m x n constraint rows.
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per row, zero off the active set.
    pub mu: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub objective: f64,
}

impl DenseQp {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || g.len() != n || c.ncols() != n && c.nrows() > 0 || d.len() != c.nrows() {
            return Err(Error::Validation(format!(
                "inconsistent QP shapes: H {}x{}, g {}, C {}x{}, d {}",
                h.nrows(),
                h.ncols(),
                g.len(),
                c.nrows(),
                c.ncols(),
                d.len()
            )));
        }
        Ok(Self { h, g, c, d })
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.g.dot(x)
    }

    pub fn solve(&self) -> Result<QpSolution> {
        self.solve_with_max_iter(100 + 10 * (self.num_vars() + self.num_rows()))
    }

    pub fn solve_with_max_iter(&self, max_iter: usize) -> Result<QpSolution> {
        let n = self.num_vars();
        let m = self.num_rows();
        let chol = Cholesky::new(self.h.clone()).ok_or(Error::QpNotPositiveDefinite)?;

        let mut x = -chol.solve(&self.g);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0usize;

        'outer: loop {
            let mut worst = VIOLATION_TOL;
            let mut candidate = None;
            for i in 0..m {
                if active.contains(&i) {
                    continue;
                }
                let violation = (self.c.row(i) * &x)[(0, 0)] - self.d[i];
                if violation > worst {
                    worst = violation;
                    candidate = Some(i);
                }
            }
            let Some(p) = candidate else { break };

            // Work in the >=-form with normal n+ = -c_p.
            let n_plus = -self.c.row(p).transpose();
            let mut u_plus = 0.0;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(Error::QpMaxIterations(max_iter));
                }

                let hinv_np = chol.solve(&n_plus);
                let q = active.len();
                let (z, r) = if q == 0 {
                    (hinv_np.clone(), DVector::zeros(0))
                } else {
                    let mut nmat = DMatrix::<f64>::zeros(n, q);
                    for (j, &a) in active.iter().enumerate() {
                        nmat.column_mut(j).copy_from(&(-self.c.row(a).transpose()));
                    }
                    let hinv_n = chol.solve(&nmat);
                    let mmat: DMatrix<f64> = nmat.transpose() * &hinv_n;
                    let rhs: DVector<f64> = nmat.transpose() * &hinv_np;
                    let r = match Cholesky::new(mmat.clone()) {
                        Some(c) => c.solve(&rhs),
                        None => mmat
                            .lu()
                            .solve(&rhs)
                            .ok_or_else(|| Error::QpInfeasible("degenerate working set".into()))?,
                    };
                    (&hinv_np - &hinv_n * &r, r)
                };

                // Dual step bound: keep working-set multipliers nonnegative.
                let mut t1 = f64::INFINITY;
                let mut blocking = None;
                for (j, rj) in r.iter().enumerate() {
                    if *rj > DUAL_DIR_TOL {
                        let t = u[j] / rj;
                        if t < t1 {
                            t1 = t;
                            blocking = Some(j);
                        }
                    }
                }

                // Primal step bound: distance to satisfy row p.
                let violation = (self.c.row(p) * &x)[(0, 0)] - self.d[p];
                let curvature = z.dot(&n_plus);
                let t2 = if curvature > CURVATURE_TOL {
                    violation / curvature
                } else {
                    f64::INFINITY
                };

                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(Error::QpInfeasible(format!(
                        "row {p} is inconsistent with the working set"
                    )));
                }

                x += &z * t;
                for (j, rj) in r.iter().enumerate() {
                    u[j] -= t * rj;
                }
                u_plus += t;

                if t2 <= t1 {
                    active.push(p);
                    u.push(u_plus);
                    continue 'outer;
                }
                // Dual-blocked: drop the row whose multiplier hit zero and
                // retry the same candidate.
                let j = blocking.unwrap();
                active.remove(j);
                u.remove(j);
            }
        }

        let mut mu = DVector::zeros(m);
        for (j, &a) in active.iter().enumerate() {
            mu[a] = u[j].max(0.0);
        }
        let objective = self.objective(&x);
        Ok(QpSolution { x, mu, active, iterations, objective })
    }
}

/// Max-norm KKT residuals (stationarity, primal feasibility,
/// complementarity) of a candidate solution.
pub fn kkt_residuals(qp: &DenseQp, x: &DVector<f64>, mu: &DVector<f64>) -> (f64, f64, f64) {
    let stat = (&qp.h * x + &qp.g + qp.c.transpose() * mu).amax();
    let mut feas = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..qp.num_rows() {
        let s = (qp.c.row(i) * x)[(0, 0)] - qp.d[i];
        feas = feas.max(s);
        comp = comp.max((mu[i] * s).abs());
    }
    (stat, feas.max(0.0), comp)
}

/// Row-major helper for building constraint matrices in tests and condensing.
pub fn dmatrix_from_rows(rows: &[DVector<f64>], ncols: usize) -> DMatrix<f64> {
    let mut c = DMatrix::<f64>::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        c.row_mut(i).copy_from(&r.transpose());
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn qp1d(h: f64, g: f64, rows: &[(f64, f64)]) -> DenseQp {
        let m = rows.len();
        let mut c = DMatrix::zeros(m, 1);
        let mut d = DVector::zeros(m);
        for (i, (ci, di)) in rows.iter().enumerate() {
            c[(i, 0)] = *ci;
            d[i] = *di;
        }
        DenseQp::new(
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, g),
            c,
            d,
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::<f64>::identity(3, 3);
        let g = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        let qp = DenseQp::new(h, g.clone(), DMatrix::zeros(0, 3), DVector::zeros(0)).unwrap();
        let sol = qp.solve().unwrap();
        assert_abs_diff_eq!(sol.x, -g, epsilon = 1e-14);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn single_active_bound() {
        // min 1/2 x^2 - 2x  s.t. x <= 1  ->  x = 1, mu = 1.
        let qp = qp1d(1.0, -2.0, &[(1.0, 1.0)]);
        let sol = qp.solve().unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.mu[0], 1.0, epsilon = 1e-14);
        assert_eq!(sol.active, vec![0]);
        let (stat, feas, comp) = kkt_residuals(&qp, &sol.x, &sol.mu);
        assert!(stat < 1e-12 && feas < 1e-12 && comp < 1e-12);
    }

    #[test]
    fn box_pair_picks_binding_side() {
        // min 1/2 x^2 + 2x  s.t. 0 <= x <= 1: lower bound binds at 0, mu = 2.
        let qp = qp1d(1.0, 2.0, &[(1.0, 1.0), (-1.0, 0.0)]);
        let sol = qp.solve().unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.mu[1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.mu[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pinned_variable_via_opposing_rows() {
        // x <= 0.5 and -x <= -0.5 pin x = 0.5.
        let qp = qp1d(1.0, -2.0, &[(1.0, 0.5), (-1.0, -0.5)]);
        let sol = qp.solve().unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-14);
        let (stat, feas, comp) = kkt_residuals(&qp, &sol.x, &sol.mu);
        assert!(stat < 1e-12 && feas < 1e-12 && comp < 1e-12);
    }

    #[test]
    fn infeasible_rows_error() {
        // x <= 0 and -x <= -1 cannot hold together.
        let qp = qp1d(1.0, 0.0, &[(1.0, 0.0), (-1.0, -1.0)]);
        assert!(matches!(qp.solve(), Err(Error::QpInfeasible(_))));
    }

    #[test]
    fn indefinite_hessian_rejected() {
        let qp = qp1d(0.0, 1.0, &[]);
        assert!(matches!(qp.solve(), Err(Error::QpNotPositiveDefinite)));
    }

    #[test]
    fn multidimensional_corner() {
        // min 1/2 |x - (2, 2)|^2 over the unit box [0,1]^2: corner (1,1),
        // both multipliers 1.
        let h = DMatrix::<f64>::identity(2, 2);
        let g = DVector::from_row_slice(&[-2.0, -2.0]);
        let c = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let d = DVector::from_row_slice(&[1.0, 1.0, 0.0, 0.0]);
        let qp = DenseQp::new(h, g, c, d).unwrap();
        let sol = qp.solve().unwrap();
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.mu[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.mu[1], 1.0, epsilon = 1e-14);
        assert!(sol.mu.iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn deterministic_resolve() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let g = DVector::from_row_slice(&[-1.0, 2.0]);
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.4, 0.2, -1.0]);
        let d = DVector::from_row_slice(&[0.3, 0.1, 0.25]);
        let qp = DenseQp::new(h, g, c, d).unwrap();
        let a = qp.solve().unwrap();
        let b = qp.solve().unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.iterations, b.iterations);
    }
}
