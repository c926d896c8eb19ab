//! Tracking-OCP data: reference trajectories and windows, quadratic tracking
//! costs, actuator box constraints, and circular-obstacle collision
//! constraints with analytic gradients.

use nalgebra::{Matrix2, Matrix5, SymmetricEigen, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    angle_diff, integrate_step, ControlInput, DiscretizationParams, RobotState,
};

/// Static circular obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Obstacle {
    pub fn validate(&self, idx: usize) -> Result<()> {
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Validation(format!("obstacles[{idx}] center must be finite")));
        }
        if !self.radius.is_finite() || self.radius < 0.0 {
            return Err(Error::Validation(format!("obstacles[{idx}].radius must be >= 0")));
        }
        Ok(())
    }
}

/// How a window indexes past the stored samples: hold the last state with
/// zero input, or wrap around for closed (loop) references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefExtension {
    Hold,
    Wrap,
}

/// State/input reference sampled at a fixed interval. `inputs` has one entry
/// fewer than `states`; dynamics consistency is a checkable property, not an
/// construction-time invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    pub states: Vec<RobotState>,
    pub inputs: Vec<ControlInput>,
    pub extension: RefExtension,
}

impl ReferenceTrajectory {
    pub fn new(dt: f64, states: Vec<RobotState>, inputs: Vec<ControlInput>) -> Result<Self> {
        Self::with_extension(dt, states, inputs, RefExtension::Hold)
    }

    pub fn with_extension(
        dt: f64,
        states: Vec<RobotState>,
        inputs: Vec<ControlInput>,
        extension: RefExtension,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyReference);
        }
        if inputs.len() + 1 != states.len() {
            return Err(Error::Validation(format!(
                "reference needs inputs.len() + 1 == states.len(), got {} + 1 != {}",
                inputs.len(),
                states.len()
            )));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Validation(format!("reference dt must be > 0, got {dt}")));
        }
        Ok(Self { dt, states, inputs, extension })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Max over steps of the infinity-norm defect between the integrated
    /// reference and the stored next state (shortest-angle on theta).
    pub fn consistency_residual(&self, p: &DiscretizationParams) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.inputs.len() {
            let pred = integrate_step(&self.states[k], &self.inputs[k], p);
            let e = state_error(&pred, &self.states[k + 1]);
            worst = worst.max(e.amax());
        }
        worst
    }
}

/// Reference window of `n + 1` states and `n` inputs starting at `t_index`.
pub fn reference_window(
    r: &ReferenceTrajectory,
    t_index: usize,
    n: usize,
) -> (Vec<RobotState>, Vec<ControlInput>) {
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    match r.extension {
        RefExtension::Hold => {
            let last = *r.states.last().unwrap();
            for k in 0..=n {
                states.push(*r.states.get(t_index + k).unwrap_or(&last));
            }
            for k in 0..n {
                inputs.push(*r.inputs.get(t_index + k).unwrap_or(&ControlInput::zeros()));
            }
        }
        RefExtension::Wrap => {
            // Period is the input count; states[period] closes the loop back
            // to states[0] up to the generator's consistency tolerance.
            let period = r.inputs.len().max(1);
            for k in 0..=n {
                states.push(r.states[(t_index + k) % period]);
            }
            for k in 0..n {
                inputs.push(r.inputs[(t_index + k) % period]);
            }
        }
    }
    (states, inputs)
}

/// Tracking error `s (-) s_ref` with shortest-angle difference on theta.
pub fn state_error(s: &RobotState, s_ref: &RobotState) -> Vector5<f64> {
    Vector5::new(
        s.x - s_ref.x,
        s.y - s_ref.y,
        angle_diff(s.theta, s_ref.theta),
        s.v - s_ref.v,
        s.omega - s_ref.omega,
    )
}

fn check_symmetric_psd(m: &Matrix5<f64>, name: &str, strict: bool) -> Result<()> {
    if (m - m.transpose()).norm() > 1e-9 * (1.0 + m.norm()) {
        return Err(Error::Validation(format!("{name} must be symmetric")));
    }
    let min_eig = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min();
    if strict && min_eig <= 0.0 {
        return Err(Error::Validation(format!("{name} must be positive definite")));
    }
    if !strict && min_eig < -1e-10 {
        return Err(Error::Validation(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

/// Tracking weights: `Q` and `Q_e` PSD on states, `R` PD on inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: Matrix5<f64>,
    pub r: Matrix2<f64>,
    pub q_e: Matrix5<f64>,
}

impl Weights {
    pub fn new(q: Matrix5<f64>, r: Matrix2<f64>, q_e: Matrix5<f64>) -> Result<Self> {
        check_symmetric_psd(&q, "weights.q", false)?;
        check_symmetric_psd(&q_e, "weights.q_e", false)?;
        if (r - r.transpose()).norm() > 1e-9 * (1.0 + r.norm()) {
            return Err(Error::Validation("weights.r must be symmetric".into()));
        }
        if SymmetricEigen::new((r + r.transpose()) * 0.5).eigenvalues.min() <= 0.0 {
            return Err(Error::Validation("weights.r must be positive definite".into()));
        }
        Ok(Self { q, r, q_e })
    }

    pub fn from_diagonals(q: [f64; 5], r: [f64; 2], q_e: [f64; 5]) -> Result<Self> {
        Self::new(
            Matrix5::from_diagonal(&Vector5::from_row_slice(&q)),
            Matrix2::from_diagonal(&Vector2::from_row_slice(&r)),
            Matrix5::from_diagonal(&Vector5::from_row_slice(&q_e)),
        )
    }
}

/// Actuator box constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("bounds.v", self.v_min, self.v_max),
            ("bounds.omega", self.omega_min, self.omega_max),
            ("bounds.a", self.a_min, self.a_max),
            ("bounds.alpha", self.alpha_min, self.alpha_max),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Validation(format!("{name}: need min < max, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Full problem data for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec {
    pub n: usize,
    pub weights: Weights,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    pub robot_radius: f64,
    /// When false (default), acceleration rows keep zero backoff.
    pub apply_accel_backoff: bool,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Validation("horizon N must be >= 1".into()));
        }
        self.bounds.validate()?;
        if !self.robot_radius.is_finite() || self.robot_radius <= 0.0 {
            return Err(Error::Validation(format!(
                "robot_radius must be > 0, got {}",
                self.robot_radius
            )));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate(i)?;
        }
        Ok(())
    }
}

/// Stage tracking cost `||u - u_ref||^2_R + ||s (-) s_ref||^2_Q`.
pub fn stage_cost(
    s: &RobotState,
    u: &ControlInput,
    s_ref: &RobotState,
    u_ref: &ControlInput,
    w: &Weights,
) -> f64 {
    let es = state_error(s, s_ref);
    let eu = u.to_vector() - u_ref.to_vector();
    (eu.transpose() * w.r * eu)[0] + (es.transpose() * w.q * es)[0]
}

/// Terminal tracking cost `||s (-) s_ref||^2_{Q_e}`.
pub fn terminal_cost(s: &RobotState, s_ref: &RobotState, w: &Weights) -> f64 {
    let es = state_error(s, s_ref);
    (es.transpose() * w.q_e * es)[0]
}

/// Minimum distance below which the collision gradient is declared singular.
pub const COLLISION_SINGULAR_DIST: f64 = 1e-9;

/// Collision constraint `h = (r_obs + r_robot) - distance`, feasible iff
/// `h <= 0`, with the analytic unit-direction gradient (zero in theta, v,
/// omega).
pub fn collision_constraint(
    s: &RobotState,
    obs: &Obstacle,
    robot_radius: f64,
) -> Result<(f64, Vector5<f64>)> {
    let dx = s.x - obs.cx;
    let dy = s.y - obs.cy;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < COLLISION_SINGULAR_DIST {
        return Err(Error::SingularGradient(dist));
    }
    let h = (obs.radius + robot_radius) - dist;
    let grad = Vector5::new(-dx / dist, -dy / dist, 0.0, 0.0, 0.0);
    Ok((h, grad))
}

/// Row class: affine rows on the linear input subsystem are exactly
/// representable and get trajectory-independent backoffs; collision rows are
/// nonlinear and re-linearized every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Box row on v or omega.
    AffineState,
    /// Box row on a or alpha.
    AffineInput,
    /// Collision row for obstacle index.
    Collision(usize),
}

impl RowKind {
    pub fn is_collision(&self) -> bool {
        matches!(self, RowKind::Collision(_))
    }
}

/// One constraint row in the `g_s' s + g_u' u <= rhs` convention. Collision
/// templates carry zero gradients; their linearization is pose-dependent.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTemplate {
    pub kind: RowKind,
    pub name: String,
    pub grad_s: Vector5<f64>,
    pub grad_u: Vector2<f64>,
    pub rhs: f64,
}

impl RowTemplate {
    fn affine_state(name: &str, grad_s: Vector5<f64>, rhs: f64) -> Self {
        Self { kind: RowKind::AffineState, name: name.into(), grad_s, grad_u: Vector2::zeros(), rhs }
    }

    fn affine_input(name: &str, grad_u: Vector2<f64>, rhs: f64) -> Self {
        Self { kind: RowKind::AffineInput, name: name.into(), grad_s: Vector5::zeros(), grad_u, rhs }
    }

    /// Constraint value `g_s' s + g_u' u - rhs` for affine rows.
    pub fn affine_value(&self, s: &RobotState, u: &ControlInput) -> f64 {
        self.grad_s.dot(&s.to_vector()) + self.grad_u.dot(&u.to_vector()) - self.rhs
    }
}

/// Constraint rows per stage and at the terminal stage. The same templates
/// apply at every interior stage, so affine gradients are constant across
/// stages by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlocks {
    pub stage: Vec<RowTemplate>,
    pub terminal: Vec<RowTemplate>,
}

/// Builds the row templates: two-sided boxes on v, omega, a, alpha plus one
/// collision row per obstacle; terminal rows drop the input boxes.
pub fn constraint_blocks(spec: &OcpSpec) -> ConstraintBlocks {
    let b = &spec.bounds;
    let ev = Vector5::new(0.0, 0.0, 0.0, 1.0, 0.0);
    let ew = Vector5::new(0.0, 0.0, 0.0, 0.0, 1.0);
    let ea = Vector2::new(1.0, 0.0);
    let eal = Vector2::new(0.0, 1.0);

    let mut state_rows = vec![
        RowTemplate::affine_state("v_max", ev, b.v_max),
        RowTemplate::affine_state("v_min", -ev, -b.v_min),
        RowTemplate::affine_state("omega_max", ew, b.omega_max),
        RowTemplate::affine_state("omega_min", -ew, -b.omega_min),
    ];
    for (i, _) in spec.obstacles.iter().enumerate() {
        state_rows.push(RowTemplate {
            kind: RowKind::Collision(i),
            name: format!("obstacle[{i}]"),
            grad_s: Vector5::zeros(),
            grad_u: Vector2::zeros(),
            rhs: 0.0,
        });
    }

    let mut stage = state_rows.clone();
    stage.extend([
        RowTemplate::affine_input("a_max", ea, b.a_max),
        RowTemplate::affine_input("a_min", -ea, -b.a_min),
        RowTemplate::affine_input("alpha_max", eal, b.alpha_max),
        RowTemplate::affine_input("alpha_min", -eal, -b.alpha_min),
    ]);

    ConstraintBlocks { stage, terminal: state_rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn weights_eye() -> Weights {
        Weights::from_diagonals([1.0; 5], [1.0; 2], [1.0; 5]).unwrap()
    }

    fn bounds_default() -> Bounds {
        Bounds {
            v_min: -1.0,
            v_max: 1.0,
            omega_min: -2.0,
            omega_max: 2.0,
            a_min: -2.0,
            a_max: 2.0,
            alpha_min: -4.0,
            alpha_max: 4.0,
        }
    }

    fn line_reference(n: usize) -> ReferenceTrajectory {
        let dt = 0.1;
        let states = (0..=n)
            .map(|k| RobotState::new(k as f64 * dt, 0.0, 0.0, 1.0, 0.0))
            .collect();
        let inputs = vec![ControlInput::zeros(); n];
        ReferenceTrajectory::new(dt, states, inputs).unwrap()
    }

    #[test]
    fn window_prefix() {
        let r = line_reference(9);
        let (s, u) = reference_window(&r, 0, 2);
        assert_eq!(s.len(), 3);
        assert_eq!(u.len(), 2);
        assert_eq!(s[2], r.states[2]);
        assert_eq!(u[1], r.inputs[1]);
    }

    #[test]
    fn window_holds_past_end() {
        let r = line_reference(9);
        let (s, u) = reference_window(&r, 50, 3);
        for sk in &s {
            assert_eq!(*sk, r.states[9]);
        }
        for uk in &u {
            assert_eq!(*uk, ControlInput::zeros());
        }
        // Partially past the end: tail held.
        let (s, _) = reference_window(&r, 8, 3);
        assert_eq!(s[0], r.states[8]);
        assert_eq!(s[1], r.states[9]);
        assert_eq!(s[2], r.states[9]);
    }

    #[test]
    fn window_wraps_modulo_period() {
        let mut r = line_reference(9);
        r.extension = RefExtension::Wrap;
        let (s, u) = reference_window(&r, 8, 4);
        assert_eq!(s[0], r.states[8]);
        assert_eq!(s[1], r.states[0]);
        assert_eq!(s[4], r.states[3]);
        assert_eq!(u[0], r.inputs[8]);
        assert_eq!(u[1], r.inputs[0]);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(matches!(
            ReferenceTrajectory::new(0.1, vec![], vec![]),
            Err(Error::EmptyReference)
        ));
    }

    #[test]
    fn consistency_residual_flags_inconsistent_reference() {
        let p = DiscretizationParams { dt: 0.1, substeps: 1 };
        let r = line_reference(9);
        assert!(r.consistency_residual(&p) < 1e-12);
        let mut bad = r.clone();
        bad.states[5].y += 0.05;
        assert!(bad.consistency_residual(&p) > 0.04);
    }

    #[test]
    fn stage_cost_zero_on_reference() {
        let w = weights_eye();
        let s = RobotState::new(0.3, -0.1, 0.7, 0.5, -0.2);
        let u = ControlInput::new(0.1, 0.2);
        assert_eq!(stage_cost(&s, &u, &s, &u, &w), 0.0);
    }

    #[test]
    fn stage_cost_quadratic_form() {
        let w = weights_eye();
        let s_ref = RobotState::zeros();
        let s = RobotState::new(2.0, 0.0, 0.0, 0.0, 0.0);
        let u = ControlInput::zeros();
        assert_abs_diff_eq!(stage_cost(&s, &u, &s_ref, &u, &w), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn stage_cost_wraps_theta() {
        let w = weights_eye();
        let s = RobotState::new(0.0, 0.0, 3.1, 0.0, 0.0);
        let s_ref = RobotState::new(0.0, 0.0, -3.1, 0.0, 0.0);
        let err = 2.0 * std::f64::consts::PI - 6.2;
        let cost = stage_cost(&s, &ControlInput::zeros(), &s_ref, &ControlInput::zeros(), &w);
        assert_abs_diff_eq!(cost, err * err, epsilon = 1e-12);
        assert!(cost < 0.01, "wrapped angle error must be used, not 6.2");
        assert_abs_diff_eq!(
            terminal_cost(&s, &s_ref, &w),
            err * err,
            epsilon = 1e-12
        );
    }

    #[test]
    fn collision_value_and_gradient() {
        let obs = Obstacle { cx: 0.0, cy: 0.0, radius: 1.0 };
        let s = RobotState::new(3.0, 0.0, 0.4, 0.2, 0.0);
        let (h, g) = collision_constraint(&s, &obs, 0.5).unwrap();
        assert_abs_diff_eq!(h, -1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-15);
        assert_eq!((g[2], g[3], g[4]), (0.0, 0.0, 0.0));

        // Exactly touching: h = 0.
        let s = RobotState::new(1.5, 0.0, 0.0, 0.0, 0.0);
        let (h, _) = collision_constraint(&s, &obs, 0.5).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn collision_gradient_matches_finite_differences() {
        let obs = Obstacle { cx: 0.5, cy: -0.3, radius: 0.4 };
        let mut rng = StdRng::seed_from_u64(21);
        let fd = 1e-6;
        let mut tested = 0;
        while tested < 100 {
            let s = RobotState::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if ((s.x - obs.cx).powi(2) + (s.y - obs.cy).powi(2)).sqrt() <= 0.1 {
                continue;
            }
            let (_, g) = collision_constraint(&s, &obs, 0.5).unwrap();
            for j in 0..5 {
                let mut sp = s.to_vector();
                let mut sm = s.to_vector();
                sp[j] += fd;
                sm[j] -= fd;
                let (hp, _) = collision_constraint(&RobotState::from_vector(&sp), &obs, 0.5).unwrap();
                let (hm, _) = collision_constraint(&RobotState::from_vector(&sm), &obs, 0.5).unwrap();
                assert_abs_diff_eq!(g[j], (hp - hm) / (2.0 * fd), epsilon = 1e-6);
            }
            tested += 1;
        }
    }

    #[test]
    fn collision_sign_equivalent_to_distance_form() {
        // h <= 0 iff distance >= sum of radii.
        let obs = Obstacle { cx: 1.0, cy: 2.0, radius: 0.7 };
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..500 {
            let s = RobotState::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0.0, 0.0, 0.0);
            let dist = ((s.x - obs.cx).powi(2) + (s.y - obs.cy).powi(2)).sqrt();
            if dist < COLLISION_SINGULAR_DIST {
                continue;
            }
            let (h, _) = collision_constraint(&s, &obs, 0.5).unwrap();
            assert_eq!(h <= 0.0, dist >= obs.radius + 0.5);
        }
    }

    #[test]
    fn collision_singular_at_center() {
        let obs = Obstacle { cx: 1.0, cy: 1.0, radius: 0.5 };
        let s = RobotState::new(1.0, 1.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            collision_constraint(&s, &obs, 0.5),
            Err(Error::SingularGradient(_))
        ));
    }

    #[test]
    fn constraint_row_counts() {
        let mut spec = OcpSpec {
            n: 10,
            weights: weights_eye(),
            bounds: bounds_default(),
            obstacles: vec![],
            robot_radius: 0.5,
            apply_accel_backoff: false,
        };
        let blocks = constraint_blocks(&spec);
        assert_eq!(blocks.stage.len(), 8);
        assert_eq!(blocks.terminal.len(), 4);
        assert!(blocks.stage.iter().all(|r| !r.kind.is_collision()));

        spec.obstacles = vec![
            Obstacle { cx: 1.0, cy: 0.0, radius: 0.3 },
            Obstacle { cx: 2.0, cy: 0.0, radius: 0.3 },
        ];
        let blocks = constraint_blocks(&spec);
        assert_eq!(blocks.stage.len(), 10);
        assert_eq!(blocks.terminal.len(), 6);
        assert_eq!(
            blocks.stage.iter().filter(|r| r.kind.is_collision()).count(),
            2
        );
    }

    #[test]
    fn affine_rows_evaluate_bounds() {
        let spec = OcpSpec {
            n: 5,
            weights: weights_eye(),
            bounds: bounds_default(),
            obstacles: vec![],
            robot_radius: 0.5,
            apply_accel_backoff: false,
        };
        let blocks = constraint_blocks(&spec);
        let s = RobotState::new(0.0, 0.0, 0.0, 1.2, 0.0); // v over the max
        let u = ControlInput::new(-2.5, 0.0); // a under the min
        let by_name = |n: &str| blocks.stage.iter().find(|r| r.name == n).unwrap();
        assert_abs_diff_eq!(by_name("v_max").affine_value(&s, &u), 0.2, epsilon = 1e-15);
        assert!(by_name("v_min").affine_value(&s, &u) < 0.0);
        assert_abs_diff_eq!(by_name("a_min").affine_value(&s, &u), 0.5, epsilon = 1e-15);
        assert!(by_name("a_max").affine_value(&s, &u) < 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(Weights::from_diagonals([1.0; 5], [0.0, 1.0], [1.0; 5]).is_err());
        assert!(Weights::from_diagonals([-1.0, 1.0, 1.0, 1.0, 1.0], [1.0; 2], [1.0; 5]).is_err());
        assert!(Weights::from_diagonals([0.0; 5], [1.0; 2], [0.0; 5]).is_ok());
    }

    #[test]
    fn bounds_validation() {
        let mut b = bounds_default();
        assert!(b.validate().is_ok());
        b.v_min = 2.0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn spec_validation() {
        let spec = OcpSpec {
            n: 0,
            weights: weights_eye(),
            bounds: bounds_default(),
            obstacles: vec![Obstacle { cx: 0.0, cy: 0.0, radius: -1.0 }],
            robot_radius: 0.5,
            apply_accel_backoff: false,
        };
        assert!(spec.validate().is_err());
        let ok = OcpSpec { n: 1, obstacles: vec![], ..spec };
        assert!(ok.validate().is_ok());
        let bad_radius = OcpSpec { robot_radius: 0.0, ..ok };
        assert!(bad_radius.validate().is_err());
    }
}
