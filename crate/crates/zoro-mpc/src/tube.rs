//! Ellipsoidal uncertainty tubes: shape-matrix propagation under the
//! closed-loop sensitivities, constraint backoffs, the scalar-radius
//! baseline, and sampling from the stacked disturbance ellipsoid.

use nalgebra::{DVector, Matrix2, Matrix2x5, Matrix5, Matrix5x2, SymmetricEigen, Vector2, Vector5};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{DiffDriveParams, DiscretizationParams, N_KIN, N_LIN, N_STATES};

/// Eigenvalues below this are treated as exactly zero when factoring or
/// inverting a noise covariance.
const EIG_TOL: f64 = 1e-12;
/// Backoff radicands below this are snapped to zero.
const RADICAND_ZERO_TOL: f64 = 1e-14;
/// Backoff radicands below this indicate a broken shape matrix.
const RADICAND_NEG_TOL: f64 = -1e-10;
/// Ancillary feedback convention: the tube closes the loop as `du = -K ds`,
/// so input gradients are lifted with `-K^T`.
const K_LIFT_SIGN: f64 = -1.0;

/// Symmetric positive-semidefinite 5x5 matrix describing an uncertainty
/// ellipsoid `{ ds : ds^T Sigma^+ ds <= 1 }`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMatrix {
    m: Matrix5<f64>,
}

impl ShapeMatrix {
    /// Wraps a symmetric matrix, re-symmetrizing to scrub rounding skew.
    /// Rejects matrices whose asymmetry exceeds rounding noise.
    pub fn new(m: Matrix5<f64>) -> Result<Self> {
        let skew = (m - m.transpose()).norm();
        if !skew.is_finite() || skew > 1e-9 * (1.0 + m.norm()) {
            return Err(Error::PsdViolation(format!(
                "shape matrix is not symmetric (skew norm {skew:.3e})"
            )));
        }
        Ok(Self::symmetrized(m))
    }

    /// Re-symmetrizes unconditionally; used after propagation steps where the
    /// skew is known to be rounding-level.
    pub fn symmetrized(m: Matrix5<f64>) -> Self {
        Self { m: (m + m.transpose()) * 0.5 }
    }

    pub fn zeros() -> Self {
        Self { m: Matrix5::zeros() }
    }

    pub fn from_diagonal(d: &Vector5<f64>) -> Self {
        Self { m: Matrix5::from_diagonal(d) }
    }

    pub fn matrix(&self) -> &Matrix5<f64> {
        &self.m
    }

    /// The (v, omega) block. Under the block-triangular closed loop this
    /// sub-tube evolves independently of the kinematic states.
    pub fn lin_block(&self) -> Matrix2<f64> {
        self.m.fixed_view::<N_LIN, N_LIN>(N_KIN, N_KIN).into_owned()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.m).eigenvalues.min()
    }
}

/// Per-step disturbance covariance `W` with its cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    w: Matrix5<f64>,
    /// `U diag(sqrt(lambda))`, zero columns for null directions.
    sqrt_factor: Matrix5<f64>,
    /// Pseudo-inverse over the range of `W`.
    pinv: Matrix5<f64>,
    eigenvalues: Vector5<f64>,
    rank: usize,
}

impl NoiseModel {
    pub fn new(w: Matrix5<f64>) -> Result<Self> {
        let skew = (w - w.transpose()).norm();
        if !skew.is_finite() || skew > 1e-9 * (1.0 + w.norm()) {
            return Err(Error::PsdViolation(format!(
                "noise covariance is not symmetric (skew norm {skew:.3e})"
            )));
        }
        let sym = (w + w.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.amax().max(1.0);
        let mut sqrt_diag = Vector5::zeros();
        let mut pinv_diag = Vector5::zeros();
        let mut eigenvalues = Vector5::zeros();
        let mut rank = 0;
        for i in 0..N_STATES {
            let lam = eig.eigenvalues[i];
            if lam < -1e-10 * scale {
                return Err(Error::PsdViolation(format!(
                    "noise covariance has negative eigenvalue {lam:.3e}"
                )));
            }
            let lam = lam.max(0.0);
            eigenvalues[i] = lam;
            if lam > EIG_TOL {
                sqrt_diag[i] = lam.sqrt();
                pinv_diag[i] = 1.0 / lam;
                rank += 1;
            }
        }
        let u = eig.eigenvectors;
        Ok(Self {
            w: sym,
            sqrt_factor: u * Matrix5::from_diagonal(&sqrt_diag),
            pinv: u * Matrix5::from_diagonal(&pinv_diag) * u.transpose(),
            eigenvalues,
            rank,
        })
    }

    /// Diagonal covariance from per-component standard deviations.
    pub fn from_std_devs(sd: [f64; N_STATES]) -> Result<Self> {
        for s in sd {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Validation(format!(
                    "noise standard deviations must be finite and >= 0, got {s}"
                )));
            }
        }
        let d = Vector5::from_iterator(sd.iter().map(|s| s * s));
        Self::new(Matrix5::from_diagonal(&d))
    }

    pub fn matrix(&self) -> &Matrix5<f64> {
        &self.w
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// `w^T W^+ w`, the squared ellipsoid radius of a single-step sample.
    pub fn membership_sq(&self, w: &Vector5<f64>) -> f64 {
        (w.transpose() * self.pinv * w)[0]
    }
}

/// Ancillary feedback gain. Only the (v, omega) block is nonzero: the gain
/// recenters the velocity states so the closed-loop linear subsystem becomes
/// `exp(-dt/tau) I`, matching the inner velocity controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackGain {
    k: Matrix2x5<f64>,
}

impl FeedbackGain {
    pub fn zero() -> Self {
        Self { k: Matrix2x5::zeros() }
    }

    pub fn from_lin_gain(k_lin: Matrix2<f64>) -> Self {
        let mut k = Matrix2x5::zeros();
        k.fixed_view_mut::<N_LIN, N_LIN>(0, N_KIN).copy_from(&k_lin);
        Self { k }
    }

    pub fn matrix(&self) -> &Matrix2x5<f64> {
        &self.k
    }

    pub fn lin_block(&self) -> Matrix2<f64> {
        self.k.fixed_view::<N_LIN, N_LIN>(0, N_KIN).into_owned()
    }
}

/// Gain matching the inner controller: `K_lin = (1 - exp(-dt/tau)) / dt * I`,
/// which makes the closed-loop velocity block exactly `exp(-dt/tau) I`.
pub fn feedback_gain(p: &DiscretizationParams, dd: &DiffDriveParams) -> Result<FeedbackGain> {
    if p.dt <= 0.0 {
        return Err(Error::DegenerateDiscretization);
    }
    let k_lin = (1.0 - (-p.dt / dd.tau).exp()) / p.dt;
    Ok(FeedbackGain::from_lin_gain(Matrix2::identity() * k_lin))
}

/// One tube step: `Sigma_next = (A - B K) Sigma (A - B K)^T + W`.
pub fn propagate(
    sigma: &ShapeMatrix,
    a: &Matrix5<f64>,
    b: &Matrix5x2<f64>,
    k: &FeedbackGain,
    w: &NoiseModel,
) -> ShapeMatrix {
    let acl = a - b * k.matrix();
    ShapeMatrix::symmetrized(acl * sigma.matrix() * acl.transpose() + w.matrix())
}

/// Shape matrices along a horizon: `[Sigma_0, ..., Sigma_N]` for `N` Jacobian
/// pairs.
pub fn propagate_trajectory(
    sigma0: &ShapeMatrix,
    jacobians: &[(Matrix5<f64>, Matrix5x2<f64>)],
    k: &FeedbackGain,
    w: &NoiseModel,
) -> Vec<ShapeMatrix> {
    let mut out = Vec::with_capacity(jacobians.len() + 1);
    out.push(*sigma0);
    for (a, b) in jacobians {
        let next = propagate(out.last().unwrap(), a, b, k, w);
        out.push(next);
    }
    out
}

fn backoff_from_radicand(radicand: f64) -> Result<f64> {
    if radicand < RADICAND_NEG_TOL {
        return Err(Error::PsdViolation(format!(
            "backoff radicand {radicand:.3e} is negative beyond rounding"
        )));
    }
    if radicand <= RADICAND_ZERO_TOL {
        return Ok(0.0);
    }
    Ok(radicand.sqrt())
}

/// Constraint backoff for a stage constraint with gradient `(grad_s, grad_u)`:
/// the half-width of the tube image under the linearized constraint, with the
/// input uncertainty induced through the ancillary feedback.
pub fn backoff(
    grad_s: &Vector5<f64>,
    grad_u: &Vector2<f64>,
    k: &FeedbackGain,
    sigma: &ShapeMatrix,
) -> Result<f64> {
    let g_eff = grad_s + k.matrix().transpose() * grad_u * K_LIFT_SIGN;
    backoff_from_radicand((g_eff.transpose() * sigma.matrix() * g_eff)[0])
}

/// Terminal backoff: no input at the last stage, so no feedback lift.
pub fn terminal_backoff(grad_s: &Vector5<f64>, sigma: &ShapeMatrix) -> Result<f64> {
    backoff_from_radicand((grad_s.transpose() * sigma.matrix() * grad_s)[0])
}

/// Scalar-radius tube baseline: a circumscribing sphere grown per step by
/// `eps_next = rho * eps + eps_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarTube {
    pub eps0: f64,
    pub rho: f64,
    pub eps_step: f64,
}

impl ScalarTube {
    pub fn new(eps0: f64, rho: f64, eps_step: f64) -> Result<Self> {
        for (name, val) in [("eps0", eps0), ("rho", rho), ("eps_step", eps_step)] {
            if !val.is_finite() || val < 0.0 {
                return Err(Error::Validation(format!(
                    "scalar tube {name} must be finite and >= 0, got {val}"
                )));
            }
        }
        Ok(Self { eps0, rho, eps_step })
    }

    /// Per-step growth bounding the disturbance ellipsoid by its
    /// circumscribing sphere.
    pub fn step_from_noise(rho: f64, w: &NoiseModel) -> Result<Self> {
        Self::new(0.0, rho, w.lambda_max().sqrt())
    }

    /// Radius at step `k` by iterating the affine recursion.
    pub fn radius(&self, k: usize) -> f64 {
        let mut eps = self.eps0;
        for _ in 0..k {
            eps = self.rho * eps + self.eps_step;
        }
        eps
    }

    /// Radii `[eps_0, ..., eps_n]`.
    pub fn radii(&self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        let mut eps = self.eps0;
        out.push(eps);
        for _ in 0..n {
            eps = self.rho * eps + self.eps_step;
            out.push(eps);
        }
        out
    }
}

/// Draws one disturbance trajectory `[w_0, ..., w_{n-1}]` from the stacked
/// ellipsoid `sum_k w_k^T W^+ w_k <= 1`. With `boundary` the stacked radius is
/// exactly 1; otherwise the sample is uniform in the ellipsoid, which in
/// `d = rank(W) * n` dimensions puts the radius at `U^(1/d)`.
pub fn sample_disturbance_trajectory(
    w: &NoiseModel,
    n: usize,
    boundary: bool,
    rng: &mut impl Rng,
) -> Vec<Vector5<f64>> {
    if n == 0 || w.rank == 0 {
        return vec![Vector5::zeros(); n];
    }
    let dim = w.rank * n;
    let mut xi = DVector::<f64>::zeros(dim);
    loop {
        for i in 0..dim {
            xi[i] = rng.sample(StandardNormal);
        }
        if xi.norm() > 1e-12 {
            break;
        }
    }
    let radius = if boundary {
        1.0
    } else {
        let u: f64 = rng.gen_range(0.0..1.0);
        u.powf(1.0 / dim as f64)
    };
    xi *= radius / xi.norm();

    // Map each stage's coordinates through the range-restricted factor.
    let mut range_cols = Vec::with_capacity(w.rank);
    for i in 0..N_STATES {
        if w.eigenvalues[i] > EIG_TOL {
            range_cols.push(w.sqrt_factor.column(i).into_owned());
        }
    }
    (0..n)
        .map(|k| {
            let mut wk = Vector5::zeros();
            for (j, col) in range_cols.iter().enumerate() {
                wk += col * xi[k * w.rank + j];
            }
            wk
        })
        .collect()
}
