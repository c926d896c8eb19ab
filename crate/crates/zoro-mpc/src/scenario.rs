//! Scenario configuration, reference generation, and noise-bound estimation.
//!
//! Scenarios are strict-schema JSON: unknown keys are rejected, defaults are
//! filled on load, and the fully-resolved config serializes back to an
//! equivalent file, so every run can echo exactly what it executed.
//!
//! Reference trajectories are never drawn as geometry and then hoped to be
//! trackable: each generator forward-simulates a bounded (a, alpha) profile
//! through the prediction model, so the result is dynamics-consistent by
//! construction and `consistency_residual` certifies it.

use std::path::Path;

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    angle_diff, integrate_step, ControlInput, DiffDriveParams, DiscretizationParams, RobotState,
};
use crate::ocp::{
    constraint_blocks, Bounds, ConstraintBlocks, Obstacle, OcpSpec, ReferenceTrajectory, Weights,
};
use crate::sim::{Controller, NoiseMode, PlantMode, PlantModel, SimOptions, SolvePolicy};
use crate::solver::{SolverContext, TubeMode, ZoroSettings};
use crate::tube::{feedback_gain, FeedbackGain, NoiseModel, ScalarTube, ShapeMatrix};

/// Fewest residual samples accepted by the noise estimator.
pub const MIN_NOISE_SAMPLES: usize = 31;

/// Generated references must certify consistency at or below this.
pub const REFERENCE_CONSISTENCY_TOL: f64 = 1e-8;

/// A symmetric 5x5 given either as its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diag([f64; 5]),
    Full([[f64; 5]; 5]),
}

impl MatrixSpec {
    pub fn zeros() -> Self {
        MatrixSpec::Diag([0.0; 5])
    }

    pub fn to_matrix(&self) -> Matrix5<f64> {
        match self {
            MatrixSpec::Diag(d) => Matrix5::from_diagonal(&Vector5::from_row_slice(d)),
            MatrixSpec::Full(rows) => {
                Matrix5::from_fn(|i, j| rows[i][j])
            }
        }
    }
}

/// Reference source: a built-in generator or a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Straight segment at constant speed.
    Line {
        speed: f64,
        duration: f64,
        #[serde(default)]
        start: [f64; 3],
    },
    /// Constant-rate turn; the turn rate is `speed / radius`.
    Circle {
        speed: f64,
        radius: f64,
        duration: f64,
        #[serde(default = "default_true")]
        ccw: bool,
    },
    /// Alternating full turns left and right with bounded ramp transitions.
    FigureEight {
        speed: f64,
        radius: f64,
        duration: f64,
    },
    /// Pure-pursuit rollout along a spline through the waypoints.
    WaypointSpline {
        waypoints: Vec<[f64; 2]>,
        speed: f64,
    },
    /// JSON file holding `dt`, `states`, `inputs`.
    File { path: String },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Zoro,
    Nominal,
    Exact,
    ScalarTube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    RealTime,
    Converge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantModeKind {
    Ideal,
    DiffDriveMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModeKind {
    Boundary,
    Interior,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub policy: PolicyKind,
    pub qp_iterations_per_sample: usize,
    pub backoff_updates_per_sample: usize,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    pub levenberg: f64,
    pub slack_penalty_l1: f64,
    pub slack_penalty_l2: f64,
    pub slack_margin: f64,
    /// Contraction factor of the scalar-tube radius recursion.
    pub scalar_rho: f64,
    pub apply_accel_backoff: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let s = ZoroSettings::default();
        Self {
            kind: ControllerKind::Zoro,
            policy: PolicyKind::RealTime,
            qp_iterations_per_sample: s.qp_iterations_per_sample,
            backoff_updates_per_sample: s.backoff_updates_per_sample,
            max_outer_iterations: s.max_outer_iterations,
            max_inner_iterations: s.max_inner_iterations,
            tol_stationarity: s.tol_stationarity,
            tol_feasibility: s.tol_feasibility,
            levenberg: s.levenberg,
            slack_penalty_l1: s.slack_penalty_l1,
            slack_penalty_l2: s.slack_penalty_l2,
            slack_margin: s.slack_margin,
            scalar_rho: 1.0,
            apply_accel_backoff: false,
        }
    }
}

impl ControllerConfig {
    pub fn settings(&self) -> ZoroSettings {
        ZoroSettings {
            qp_iterations_per_sample: self.qp_iterations_per_sample,
            backoff_updates_per_sample: self.backoff_updates_per_sample,
            max_outer_iterations: self.max_outer_iterations,
            max_inner_iterations: self.max_inner_iterations,
            tol_stationarity: self.tol_stationarity,
            tol_feasibility: self.tol_feasibility,
            levenberg: self.levenberg,
            slack_penalty_l1: self.slack_penalty_l1,
            slack_penalty_l2: self.slack_penalty_l2,
            slack_margin: self.slack_margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub mode: PlantModeKind,
    pub noise_mode: NoiseModeKind,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            mode: PlantModeKind::Ideal,
            noise_mode: NoiseModeKind::Boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub reference: ReferenceConfig,
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_q_diag")]
    pub q_diag: [f64; 5],
    #[serde(default = "default_r_diag")]
    pub r_diag: [f64; 2],
    #[serde(default = "default_q_diag")]
    pub q_e_diag: [f64; 5],
    #[serde(default = "default_bounds")]
    pub bounds: Bounds,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default = "default_robot_radius")]
    pub robot_radius: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Disturbance-ellipsoid shape `W` (diagonal entries are squared
    /// per-component bounds). Zero means no assumed disturbance.
    #[serde(default = "MatrixSpec::zeros")]
    pub noise_w: MatrixSpec,
    /// Initial tube shape.
    #[serde(default = "MatrixSpec::zeros")]
    pub sigma0: MatrixSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub delay: f64,
    /// Closed-loop start state; defaults to the reference's first state.
    #[serde(default)]
    pub start: Option<[f64; 5]>,
}

fn default_dt() -> f64 {
    0.05
}
fn default_substeps() -> usize {
    1
}
fn default_q_diag() -> [f64; 5] {
    [5.0, 5.0, 1.0, 1.0, 1.0]
}
fn default_r_diag() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_robot_radius() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    0.3
}
fn default_steps() -> usize {
    200
}
fn default_bounds() -> Bounds {
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

impl ScenarioConfig {
    /// Smallest useful scenario; everything else comes from defaults.
    pub fn minimal(reference: ReferenceConfig, horizon: usize) -> Self {
        Self {
            reference,
            horizon,
            dt: default_dt(),
            substeps: default_substeps(),
            q_diag: default_q_diag(),
            r_diag: default_r_diag(),
            q_e_diag: default_q_diag(),
            bounds: default_bounds(),
            obstacles: Vec::new(),
            robot_radius: default_robot_radius(),
            tau: default_tau(),
            noise_w: MatrixSpec::zeros(),
            sigma0: MatrixSpec::zeros(),
            controller: ControllerConfig::default(),
            plant: PlantConfig::default(),
            seed: 0,
            steps: default_steps(),
            delay: 0.0,
            start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.disc()?;
        self.weights()?;
        self.bounds.validate()?;
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate(i)?;
        }
        if !(self.robot_radius.is_finite() && self.robot_radius > 0.0) {
            return Err(Error::Validation(format!(
                "robot_radius must be > 0, got {}",
                self.robot_radius
            )));
        }
        DiffDriveParams::new(self.tau)?;
        self.noise_model()?;
        self.sigma0_shape()?;
        self.controller.settings().validate()?;
        if !(self.controller.scalar_rho.is_finite() && self.controller.scalar_rho >= 0.0) {
            return Err(Error::Validation(format!(
                "controller.scalar_rho must be finite and >= 0, got {}",
                self.controller.scalar_rho
            )));
        }
        if self.horizon < 1 {
            return Err(Error::Validation("horizon must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(Error::Validation(format!(
                "delay must be finite and >= 0, got {}",
                self.delay
            )));
        }
        if let Some(s) = &self.start {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("start must be finite".into()));
            }
        }
        validate_reference_params(&self.reference, &self.bounds)?;
        Ok(())
    }

    pub fn disc(&self) -> Result<DiscretizationParams> {
        DiscretizationParams::new(self.dt, self.substeps)
    }

    pub fn weights(&self) -> Result<Weights> {
        Weights::from_diagonals(self.q_diag, self.r_diag, self.q_e_diag)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.noise_w.to_matrix())
    }

    pub fn sigma0_shape(&self) -> Result<ShapeMatrix> {
        ShapeMatrix::new(self.sigma0.to_matrix())
    }

    pub fn ocp_spec(&self) -> Result<OcpSpec> {
        let spec = OcpSpec {
            n: self.horizon,
            weights: self.weights()?,
            bounds: self.bounds,
            obstacles: self.obstacles.clone(),
            robot_radius: self.robot_radius,
            apply_accel_backoff: self.controller.apply_accel_backoff,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Serializes the fully-resolved config (defaults included).
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a run needs, owned in one place so `SolverContext` can borrow.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub spec: OcpSpec,
    pub blocks: ConstraintBlocks,
    pub disc: DiscretizationParams,
    pub gain: FeedbackGain,
    pub noise: NoiseModel,
    pub sigma0: ShapeMatrix,
    pub settings: ZoroSettings,
    pub mode: TubeMode,
    pub plant: PlantModel,
    pub reference: ReferenceTrajectory,
    pub options: SimOptions,
    pub scalar: ScalarTube,
}

impl Assembled {
    pub fn ctx(&self) -> SolverContext<'_> {
        SolverContext {
            spec: &self.spec,
            blocks: &self.blocks,
            disc: &self.disc,
            gain: &self.gain,
            noise: &self.noise,
            sigma0: &self.sigma0,
            mode: &self.mode,
            settings: &self.settings,
        }
    }

    /// Controller instance for `kind` under this scenario's noise.
    pub fn controller(&self, kind: ControllerKind) -> Controller {
        match kind {
            ControllerKind::Zoro => Controller::Zoro,
            ControllerKind::Nominal => Controller::Nominal,
            ControllerKind::Exact => Controller::Exact,
            ControllerKind::ScalarTube => Controller::ScalarTube(self.scalar),
        }
    }
}

/// Builds the full runtime bundle from a validated config.
pub fn assemble(cfg: &ScenarioConfig) -> Result<Assembled> {
    cfg.validate()?;
    let disc = cfg.disc()?;
    let dd = DiffDriveParams::new(cfg.tau)?;
    let spec = cfg.ocp_spec()?;
    let noise = cfg.noise_model()?;
    let reference = build_reference(&cfg.reference, &cfg.bounds, &disc)?;
    let scalar = ScalarTube::step_from_noise(cfg.controller.scalar_rho, &noise)?;
    let controller = match cfg.controller.kind {
        ControllerKind::Zoro => Controller::Zoro,
        ControllerKind::Nominal => Controller::Nominal,
        ControllerKind::Exact => Controller::Exact,
        ControllerKind::ScalarTube => Controller::ScalarTube(scalar),
    };
    let policy = match cfg.controller.policy {
        PolicyKind::RealTime => SolvePolicy::RealTime,
        PolicyKind::Converge => SolvePolicy::Converge,
    };
    let start = cfg
        .start
        .map(|s| RobotState::new(s[0], s[1], s[2], s[3], s[4]))
        .unwrap_or(reference.states[0]);
    let options = SimOptions {
        controller,
        policy,
        delay: cfg.delay,
        steps: cfg.steps,
        start,
        seed: cfg.seed,
        stream: 0,
    };
    Ok(Assembled {
        blocks: constraint_blocks(&spec),
        gain: feedback_gain(&disc, &dd)?,
        sigma0: cfg.sigma0_shape()?,
        settings: cfg.controller.settings(),
        mode: TubeMode::Ellipsoidal,
        plant: PlantModel {
            mode: match cfg.plant.mode {
                PlantModeKind::Ideal => PlantMode::Ideal,
                PlantModeKind::DiffDriveMismatch => PlantMode::DiffDriveMismatch,
            },
            dd,
            noise: noise.clone(),
            noise_mode: match cfg.plant.noise_mode {
                NoiseModeKind::Boundary => NoiseMode::Boundary,
                NoiseModeKind::Interior => NoiseMode::Interior,
                NoiseModeKind::Off => NoiseMode::Off,
            },
        },
        spec,
        disc,
        noise,
        reference,
        options,
        scalar,
    })
}

fn validate_reference_params(r: &ReferenceConfig, b: &Bounds) -> Result<()> {
    let check_speed = |speed: f64| -> Result<()> {
        if !(speed.is_finite() && speed > 0.0) {
            return Err(Error::Validation(format!(
                "reference.speed must be > 0, got {speed}"
            )));
        }
        if speed > b.v_max {
            return Err(Error::Validation(format!(
                "reference.speed {speed} exceeds bounds.v_max {}",
                b.v_max
            )));
        }
        Ok(())
    };
    let check_duration = |d: f64| -> Result<()> {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::Validation(format!(
                "reference.duration must be > 0, got {d}"
            )));
        }
        Ok(())
    };
    match r {
        ReferenceConfig::Line { speed, duration, start } => {
            check_speed(*speed)?;
            check_duration(*duration)?;
            if start.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("reference.start must be finite".into()));
            }
        }
        ReferenceConfig::Circle { speed, radius, duration, .. }
        | ReferenceConfig::FigureEight { speed, radius, duration } => {
            check_speed(*speed)?;
            check_duration(*duration)?;
            if !(radius.is_finite() && *radius > 0.0) {
                return Err(Error::Validation(format!(
                    "reference.radius must be > 0, got {radius}"
                )));
            }
            // The turn rate is used with both signs; compare against the
            // tighter side of the omega box.
            let omega = speed / radius;
            if omega > b.omega_max.min(-b.omega_min) {
                return Err(Error::Validation(format!(
                    "reference.radius {radius} implies turn rate {omega} outside bounds.omega"
                )));
            }
        }
        ReferenceConfig::WaypointSpline { waypoints, speed } => {
            check_speed(*speed)?;
            if waypoints.len() < 2 {
                return Err(Error::Validation(format!(
                    "reference.waypoints needs at least 2 points, got {}",
                    waypoints.len()
                )));
            }
            if waypoints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation("reference.waypoints must be finite".into()));
            }
        }
        ReferenceConfig::File { path } => {
            if path.is_empty() {
                return Err(Error::Validation("reference.path must not be empty".into()));
            }
        }
    }
    Ok(())
}

/// Generates (or loads) the reference and certifies dynamics consistency.
pub fn build_reference(
    r: &ReferenceConfig,
    bounds: &Bounds,
    disc: &DiscretizationParams,
) -> Result<ReferenceTrajectory> {
    validate_reference_params(r, bounds)?;
    let reference = match r {
        ReferenceConfig::Line { speed, duration, start } => {
            let steps = steps_for(*duration, disc.dt);
            let s0 = RobotState::new(start[0], start[1], start[2], *speed, 0.0);
            simulate_profile(s0, vec![ControlInput::zeros(); steps], disc)?
        }
        ReferenceConfig::Circle { speed, radius, duration, ccw } => {
            let steps = steps_for(*duration, disc.dt);
            let omega = if *ccw { speed / radius } else { -speed / radius };
            let s0 = RobotState::new(0.0, 0.0, 0.0, *speed, omega);
            simulate_profile(s0, vec![ControlInput::zeros(); steps], disc)?
        }
        ReferenceConfig::FigureEight { speed, radius, duration } => {
            figure_eight_profile(*speed, *radius, *duration, bounds, disc)?
        }
        ReferenceConfig::WaypointSpline { waypoints, speed } => {
            waypoint_profile(waypoints, *speed, bounds, disc)?
        }
        ReferenceConfig::File { path } => load_reference_file(Path::new(path), disc)?,
    };
    let residual = reference.consistency_residual(disc);
    if residual > REFERENCE_CONSISTENCY_TOL {
        return Err(Error::Validation(format!(
            "reference is not dynamics-consistent: residual {residual:.3e} exceeds {REFERENCE_CONSISTENCY_TOL:.0e}"
        )));
    }
    Ok(reference)
}

fn steps_for(duration: f64, dt: f64) -> usize {
    ((duration / dt).ceil() as usize).max(1)
}

/// Rolls the inputs through the prediction model; consistency is exact.
fn simulate_profile(
    start: RobotState,
    inputs: Vec<ControlInput>,
    disc: &DiscretizationParams,
) -> Result<ReferenceTrajectory> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(start);
    for u in &inputs {
        let next = integrate_step(states.last().unwrap(), u, disc);
        states.push(next);
    }
    ReferenceTrajectory::new(disc.dt, states, inputs)
}

/// Full turn left, ramp, full turn right, ramp back, repeated. The ramp uses
/// a constant angular acceleration sized to half the bound, and the turn
/// rate lands exactly on the opposite sign because the omega dynamics are
/// exactly integrated under piecewise-constant inputs.
fn figure_eight_profile(
    speed: f64,
    radius: f64,
    duration: f64,
    bounds: &Bounds,
    disc: &DiscretizationParams,
) -> Result<ReferenceTrajectory> {
    let omega0 = speed / radius;
    let steps = steps_for(duration, disc.dt);
    let circle_steps = ((2.0 * std::f64::consts::PI / omega0 / disc.dt).round() as usize).max(1);
    let alpha_cap = 0.5 * bounds.alpha_max.min(-bounds.alpha_min);
    let ramp_steps = ((2.0 * omega0 / alpha_cap / disc.dt).ceil() as usize).max(1);
    let mut inputs = Vec::with_capacity(steps);
    let mut sign = 1.0f64;
    while inputs.len() < steps {
        for _ in 0..circle_steps {
            inputs.push(ControlInput::zeros());
            if inputs.len() == steps {
                break;
            }
        }
        if inputs.len() == steps {
            break;
        }
        let alpha = -sign * 2.0 * omega0 / (ramp_steps as f64 * disc.dt);
        for _ in 0..ramp_steps {
            inputs.push(ControlInput::new(0.0, alpha));
            if inputs.len() == steps {
                break;
            }
        }
        sign = -sign;
    }
    let s0 = RobotState::new(0.0, 0.0, 0.0, speed, omega0);
    simulate_profile(s0, inputs, disc)
}

/// Catmull-Rom polyline through the waypoints, arc-length tabulated.
fn spline_polyline(waypoints: &[[f64; 2]]) -> (Vec<[f64; 2]>, Vec<f64>) {
    const SAMPLES_PER_SEGMENT: usize = 64;
    let m = waypoints.len();
    let point = |i: isize| -> [f64; 2] {
        let idx = i.clamp(0, m as isize - 1) as usize;
        waypoints[idx]
    };
    let mut pts = Vec::with_capacity((m - 1) * SAMPLES_PER_SEGMENT + 1);
    pts.push(waypoints[0]);
    for seg in 0..m - 1 {
        let p0 = point(seg as isize - 1);
        let p1 = point(seg as isize);
        let p2 = point(seg as isize + 1);
        let p3 = point(seg as isize + 2);
        for j in 1..=SAMPLES_PER_SEGMENT {
            let t = j as f64 / SAMPLES_PER_SEGMENT as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let mut p = [0.0; 2];
            for d in 0..2 {
                let m1 = 0.5 * (p2[d] - p0[d]);
                let m2 = 0.5 * (p3[d] - p1[d]);
                p[d] = (2.0 * t3 - 3.0 * t2 + 1.0) * p1[d]
                    + (t3 - 2.0 * t2 + t) * m1
                    + (-2.0 * t3 + 3.0 * t2) * p2[d]
                    + (t3 - t2) * m2;
            }
            pts.push(p);
        }
    }
    let mut arcs = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    arcs.push(0.0);
    for i in 1..pts.len() {
        let dx = pts[i][0] - pts[i - 1][0];
        let dy = pts[i][1] - pts[i - 1][1];
        acc += (dx * dx + dy * dy).sqrt();
        arcs.push(acc);
    }
    (pts, arcs)
}

fn point_at_arc(pts: &[[f64; 2]], arcs: &[f64], s: f64) -> [f64; 2] {
    let s = s.clamp(0.0, *arcs.last().unwrap());
    let i = match arcs.binary_search_by(|a| a.partial_cmp(&s).unwrap()) {
        Ok(i) => return pts[i],
        Err(i) => i,
    };
    let (lo, hi) = (i - 1, i.min(arcs.len() - 1));
    let span = arcs[hi] - arcs[lo];
    if span <= 0.0 {
        return pts[lo];
    }
    let t = (s - arcs[lo]) / span;
    [
        pts[lo][0] + t * (pts[hi][0] - pts[lo][0]),
        pts[lo][1] + t * (pts[hi][1] - pts[lo][1]),
    ]
}

/// Pure-pursuit rollout: steer toward a lookahead point sliding along the
/// spline at the commanded speed, with inputs clamped inside the bounds.
/// The output is whatever the model does under those inputs, so consistency
/// is exact and the path only approximates the waypoints.
fn waypoint_profile(
    waypoints: &[[f64; 2]],
    speed: f64,
    bounds: &Bounds,
    disc: &DiscretizationParams,
) -> Result<ReferenceTrajectory> {
    let (pts, arcs) = spline_polyline(waypoints);
    let total = *arcs.last().unwrap();
    let lookahead = (0.8 * speed).clamp(0.2, 1.5);
    if total <= lookahead {
        return Err(Error::Validation(format!(
            "reference.waypoints path length {total:.3} m is shorter than the {lookahead:.3} m lookahead"
        )));
    }
    let dt = disc.dt;
    let max_steps = ((total / (speed * dt)).ceil() as usize) * 2 + 200;
    let first_target = point_at_arc(&pts, &arcs, lookahead);
    let theta0 = (first_target[1] - waypoints[0][1]).atan2(first_target[0] - waypoints[0][0]);
    let mut s = RobotState::new(waypoints[0][0], waypoints[0][1], theta0, speed, 0.0);
    let mut states = vec![s];
    let mut inputs = Vec::new();
    let mut progress = 0.0f64;
    for _ in 0..max_steps {
        progress = (progress + speed * dt).min(total);
        let target = point_at_arc(&pts, &arcs, (progress + lookahead).min(total));
        let desired = (target[1] - s.y).atan2(target[0] - s.x);
        let err = angle_diff(desired, s.theta);
        let omega_des = (2.0 * speed * err.sin() / lookahead)
            .clamp(0.9 * bounds.omega_min, 0.9 * bounds.omega_max);
        let alpha = ((omega_des - s.omega) / dt).clamp(0.9 * bounds.alpha_min, 0.9 * bounds.alpha_max);
        let a = ((speed - s.v) / dt).clamp(0.9 * bounds.a_min, 0.9 * bounds.a_max);
        let u = ControlInput::new(a, alpha);
        s = integrate_step(&s, &u, disc);
        states.push(s);
        inputs.push(u);
        if progress >= total {
            let end = pts.last().unwrap();
            let dist = ((s.x - end[0]).powi(2) + (s.y - end[1]).powi(2)).sqrt();
            if dist <= lookahead {
                break;
            }
        }
    }
    ReferenceTrajectory::new(dt, states, inputs)
}

/// On-disk reference: plain arrays, same layout the generators produce.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    dt: f64,
    states: Vec<[f64; 5]>,
    inputs: Vec<[f64; 2]>,
}

fn load_reference_file(path: &Path, disc: &DiscretizationParams) -> Result<ReferenceTrajectory> {
    let text = std::fs::read_to_string(path)?;
    let file: ReferenceFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if (file.dt - disc.dt).abs() > 1e-12 {
        return Err(Error::Validation(format!(
            "reference file dt {} does not match scenario dt {}",
            file.dt, disc.dt
        )));
    }
    let states: Vec<RobotState> = file
        .states
        .iter()
        .map(|s| RobotState::new(s[0], s[1], s[2], s[3], s[4]))
        .collect();
    let inputs: Vec<ControlInput> = file.inputs.iter().map(|u| ControlInput::new(u[0], u[1])).collect();
    ReferenceTrajectory::new(file.dt, states, inputs)
}

/// Writes a reference in the `ReferenceConfig::File` layout.
pub fn save_reference_file(path: &Path, r: &ReferenceTrajectory) -> Result<()> {
    let file = ReferenceFile {
        dt: r.dt,
        states: r.states.iter().map(|s| [s.x, s.y, s.theta, s.v, s.omega]).collect(),
        inputs: r.inputs.iter().map(|u| [u.a, u.alpha]).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file).expect("reference serializes"))?;
    Ok(())
}

/// Per-component disturbance bounds recovered from logged transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Sample standard deviation of each residual component.
    pub sigma: [f64; 5],
    /// Diagonal of the recommended ellipsoid: `(3 sigma)^2`.
    pub w_diag: [f64; 5],
    pub samples: usize,
}

impl NoiseEstimate {
    pub fn noise_model(&self) -> Result<NoiseModel> {
        NoiseModel::new(Matrix5::from_diagonal(&Vector5::from_row_slice(&self.w_diag)))
    }
}

/// Residuals `w_k = s_{k+1} - psi(s_k, u_k)` (shortest angle on theta),
/// reduced to centered per-component standard deviations and the
/// three-sigma ellipsoid diagonal.
pub fn estimate_noise_bounds(
    states: &[RobotState],
    inputs: &[ControlInput],
    p: &DiscretizationParams,
) -> Result<NoiseEstimate> {
    let n = inputs.len().min(states.len().saturating_sub(1));
    if n < MIN_NOISE_SAMPLES {
        return Err(Error::TooFewSamples { got: n, need: MIN_NOISE_SAMPLES });
    }
    let mut residuals = Vec::with_capacity(n);
    for k in 0..n {
        let predicted = integrate_step(&states[k], &inputs[k], p);
        let next = states[k + 1];
        residuals.push(Vector5::new(
            next.x - predicted.x,
            next.y - predicted.y,
            angle_diff(next.theta, predicted.theta),
            next.v - predicted.v,
            next.omega - predicted.omega,
        ));
    }
    let mut sigma = [0.0f64; 5];
    let mut w_diag = [0.0f64; 5];
    for i in 0..5 {
        let mean = residuals.iter().map(|w| w[i]).sum::<f64>() / n as f64;
        let var = residuals.iter().map(|w| (w[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        sigma[i] = var.sqrt();
        w_diag[i] = (3.0 * sigma[i]).powi(2);
    }
    Ok(NoiseEstimate { sigma, w_diag, samples: n })
}
