//! Differential-drive dynamics, RK4 integration with exact sensitivities,
//! and the first-order model of the inner velocity controller.
//!
//! The state is `s = (x, y, theta, v, omega)`. The first three components
//! form the kinematic part, the last two the linear input subsystem: their
//! discrete dynamics are linear in `(v, omega)` and the input `(a, alpha)`
//! regardless of the rest of the state.

use nalgebra::{Matrix2, Matrix5, Matrix5x2, Vector2, Vector5};

use crate::error::{Error, Result};

pub const N_STATES: usize = 5;
pub const N_INPUTS: usize = 2;
/// Size of the kinematic block (x, y, theta).
pub const N_KIN: usize = 3;
/// Size of the linear input subsystem block (v, omega).
pub const N_LIN: usize = 2;

/// Planar differential-drive state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, omega: f64) -> Self {
        Self { x, y, theta, v, omega }
    }

    pub fn zeros() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(self) -> Vector5<f64> {
        Vector5::new(self.x, self.y, self.theta, self.v, self.omega)
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Linear-subsystem components (v, omega).
    pub fn lin(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.omega)
    }
}

/// Forward and angular acceleration command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub a: f64,
    pub alpha: f64,
}

impl ControlInput {
    pub fn new(a: f64, alpha: f64) -> Self {
        Self { a, alpha }
    }

    pub fn zeros() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.a, self.alpha)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Fixed-step integrator setup: classical RK4 with `substeps` equal substeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationParams {
    pub dt: f64,
    pub substeps: usize,
}

impl DiscretizationParams {
    pub fn new(dt: f64, substeps: usize) -> Result<Self> {
        if !dt.is_finite() || dt < 0.0 {
            return Err(Error::Validation(format!("discretization.dt must be finite and >= 0, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::Validation("discretization.substeps must be >= 1".into()));
        }
        Ok(Self { dt, substeps })
    }
}

/// Time constant of the inner differential-drive velocity controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffDriveParams {
    pub tau: f64,
}

impl DiffDriveParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Validation(format!("tau must be finite and > 0, got {tau}")));
        }
        Ok(Self { tau })
    }
}

/// Continuous-time state derivative (v cos theta, v sin theta, omega, a, alpha).
pub fn continuous_dynamics(s: &RobotState, u: &ControlInput) -> Vector5<f64> {
    Vector5::new(
        s.v * s.theta.cos(),
        s.v * s.theta.sin(),
        s.omega,
        u.a,
        u.alpha,
    )
}

/// Partials of the continuous dynamics with respect to state and input.
fn continuous_jacobians(s: &Vector5<f64>) -> (Matrix5<f64>, Matrix5x2<f64>) {
    let (theta, v) = (s[2], s[3]);
    let mut js = Matrix5::zeros();
    js[(0, 2)] = -v * theta.sin();
    js[(0, 3)] = theta.cos();
    js[(1, 2)] = v * theta.cos();
    js[(1, 3)] = theta.sin();
    js[(2, 4)] = 1.0;
    let mut ju = Matrix5x2::zeros();
    ju[(3, 0)] = 1.0;
    ju[(4, 1)] = 1.0;
    (js, ju)
}

fn deriv(s: &Vector5<f64>, u: &Vector2<f64>) -> Vector5<f64> {
    Vector5::new(s[3] * s[2].cos(), s[3] * s[2].sin(), s[4], u[0], u[1])
}

/// One RK4 substep of length `h` together with exact stage-chained sensitivities.
fn rk4_substep(s: &Vector5<f64>, u: &Vector2<f64>, h: f64) -> (Vector5<f64>, Matrix5<f64>, Matrix5x2<f64>) {
    let eye = Matrix5::identity();

    let k1 = deriv(s, u);
    let (j1s, j1u) = continuous_jacobians(s);

    let s2 = s + k1 * (h / 2.0);
    let k2 = deriv(&s2, u);
    let (j2s, j2u) = continuous_jacobians(&s2);

    let s3 = s + k2 * (h / 2.0);
    let k3 = deriv(&s3, u);
    let (j3s, j3u) = continuous_jacobians(&s3);

    let s4 = s + k3 * h;
    let k4 = deriv(&s4, u);
    let (j4s, j4u) = continuous_jacobians(&s4);

    let dk1_ds = j1s;
    let dk1_du = j1u;
    let dk2_ds = j2s * (eye + dk1_ds * (h / 2.0));
    let dk2_du = j2s * dk1_du * (h / 2.0) + j2u;
    let dk3_ds = j3s * (eye + dk2_ds * (h / 2.0));
    let dk3_du = j3s * dk2_du * (h / 2.0) + j3u;
    let dk4_ds = j4s * (eye + dk3_ds * h);
    let dk4_du = j4s * dk3_du * h + j4u;

    let next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let a = eye + (dk1_ds + dk2_ds * 2.0 + dk3_ds * 2.0 + dk4_ds) * (h / 6.0);
    let b = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * (h / 6.0);
    (next, a, b)
}

/// Discrete map `psi(s, u)` over one sample interval, piecewise-constant input.
pub fn integrate_step(s: &RobotState, u: &ControlInput, p: &DiscretizationParams) -> RobotState {
    let h = p.dt / p.substeps as f64;
    let uv = u.to_vector();
    let mut sv = s.to_vector();
    for _ in 0..p.substeps {
        let (next, _, _) = rk4_substep(&sv, &uv, h);
        sv = next;
    }
    RobotState::from_vector(&sv)
}

/// State and integrator sensitivities in one pass.
///
/// The returned matrices are the exact derivatives of the discrete map, so
/// tube propagation and QP linearization use the same arithmetic as the
/// integrator itself.
pub fn integrate_with_sensitivities(
    s: &RobotState,
    u: &ControlInput,
    p: &DiscretizationParams,
) -> (RobotState, Matrix5<f64>, Matrix5x2<f64>) {
    let h = p.dt / p.substeps as f64;
    let uv = u.to_vector();
    let mut sv = s.to_vector();
    let mut a_tot = Matrix5::identity();
    let mut b_tot = Matrix5x2::zeros();
    for _ in 0..p.substeps {
        let (next, a, b) = rk4_substep(&sv, &uv, h);
        sv = next;
        b_tot = a * b_tot + b;
        a_tot = a * a_tot;
    }
    (RobotState::from_vector(&sv), a_tot, b_tot)
}

/// Sensitivities `A = d psi/d s`, `B = d psi/d u` of the discrete map.
pub fn discrete_jacobians(
    s: &RobotState,
    u: &ControlInput,
    p: &DiscretizationParams,
) -> (Matrix5<f64>, Matrix5x2<f64>) {
    let (_, a, b) = integrate_with_sensitivities(s, u, p);
    (a, b)
}

/// Discrete matrices of the linear input subsystem: `A_lin = I`, `B_lin = dt I`.
///
/// Exact for the double-integrator rows under RK4 with piecewise-constant
/// input, for any substep count.
pub fn linear_subsystem_matrices(p: &DiscretizationParams) -> (Matrix2<f64>, Matrix2<f64>) {
    (Matrix2::identity(), Matrix2::identity() * p.dt)
}

/// One sample of the inner velocity-controller model: exponential decay of
/// the command tracking error with time constant `tau`.
pub fn diff_drive_response(
    v_rob: f64,
    omega_rob: f64,
    v_cmd: f64,
    omega_cmd: f64,
    dt: f64,
    dd: &DiffDriveParams,
) -> (f64, f64) {
    let decay = (-dt / dd.tau).exp();
    (
        v_cmd + (v_rob - v_cmd) * decay,
        omega_cmd + (omega_rob - omega_cmd) * decay,
    )
}

/// Shortest signed angular difference `a - b`, wrapped into (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut d = (a - b) % two_pi;
    if d > std::f64::consts::PI {
        d -= two_pi;
    } else if d <= -std::f64::consts::PI {
        d += two_pi;
    }
    d
}
