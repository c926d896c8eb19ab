//! Closed-loop simulation: a controller driving a disturbed plant, with
//! compute-delay compensation, per-step logging, and summary metrics.
//!
//! The plant is either the prediction model itself (`Ideal`) or a
//! deliberately mismatched variant whose velocity states follow the inner
//! velocity-controller lag instead of the ideal double integrator
//! (`DiffDriveMismatch`). Disturbances are drawn from the stacked ellipsoid
//! the controller assumes; `Boundary` mode draws worst-case trajectories on
//! the ellipsoid surface per controller-horizon window, `Interior` draws
//! per-step i.i.d. samples inside the single-step set.

use std::time::Instant;

use nalgebra::Vector5;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    diff_drive_response, integrate_step, ControlInput, DiffDriveParams, DiscretizationParams,
    RobotState,
};
use crate::ocp::{reference_window, state_error, ReferenceTrajectory};
use crate::oracle::{solve_exact_robust, solve_nominal};
use crate::solver::{
    zoro_solve_to_convergence, zoro_step, OcpSolution, SolverContext, Trajectory, TubeMode,
};
use crate::tube::{sample_disturbance_trajectory, NoiseModel, ScalarTube};

/// Multiplier threshold above which a collision row counts as active.
pub const ACTIVE_MU_TOL: f64 = 1e-6;

/// Which physics the plant integrates between samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantMode {
    /// Plant equals the prediction model.
    Ideal,
    /// Kinematics from the prediction model, velocities from the inner
    /// velocity-controller lag chasing the integrated commands.
    DiffDriveMismatch,
}

/// How process disturbances are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Horizon-length trajectories on the stacked-ellipsoid boundary.
    Boundary,
    /// Per-step i.i.d. draws uniform inside the single-step ellipsoid.
    Interior,
    Off,
}

impl NoiseMode {
    pub fn label(&self) -> &'static str {
        match self {
            NoiseMode::Boundary => "boundary",
            NoiseMode::Interior => "interior",
            NoiseMode::Off => "off",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantModel {
    pub mode: PlantMode,
    pub dd: DiffDriveParams,
    pub noise: NoiseModel,
    pub noise_mode: NoiseMode,
}

/// Controller run at every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    /// Frozen-backoff scheme: tube refreshes interleaved with QP iterations.
    Zoro,
    /// Same solver with the tube forced to zero (no backoffs).
    Nominal,
    /// Exact robust reference solver, always run to convergence.
    Exact,
    /// Circumscribing-sphere baseline: collision rows backed off by a scalar
    /// radius recursion instead of the ellipsoid.
    ScalarTube(ScalarTube),
}

impl Controller {
    pub fn label(&self) -> &'static str {
        match self {
            Controller::Zoro => "zoro",
            Controller::Nominal => "nominal",
            Controller::Exact => "exact",
            Controller::ScalarTube(_) => "scalar-tube",
        }
    }
}

/// Per-sample solve effort for the iterative controllers. `Exact` ignores
/// this and always converges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePolicy {
    /// Fixed tube-update/QP-iteration budget per sample (real-time).
    RealTime,
    /// Iterate to the KKT tolerances before committing the input.
    Converge,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub controller: Controller,
    pub policy: SolvePolicy,
    /// Compute delay compensated by forward prediction [s]; 0 disables.
    pub delay: f64,
    pub steps: usize,
    pub start: RobotState,
    pub seed: u64,
    /// RNG stream index; Monte Carlo batches use the run index.
    pub stream: u64,
}

impl SimOptions {
    pub fn new(controller: Controller, steps: usize, start: RobotState, seed: u64) -> Self {
        Self {
            controller,
            policy: SolvePolicy::RealTime,
            delay: 0.0,
            steps,
            start,
            seed,
            stream: 0,
        }
    }
}

/// One closed-loop sample: the state the controller saw, what it commanded,
/// and what the plant did about it.
#[derive(Debug, Clone)]
pub struct SimStep {
    pub step: usize,
    pub time: f64,
    /// True plant state at the sample instant (before applying `input`).
    pub state: RobotState,
    /// Commanded first input (or the held previous command on failure).
    pub input: ControlInput,
    /// Disturbance applied over this interval.
    pub noise: Vector5<f64>,
    pub qp_iterations: usize,
    /// Controller wall time [s]; excluded from the determinism contract.
    pub solve_time: f64,
    pub err_pos: f64,
    /// Signed shortest-angle heading error [rad].
    pub err_theta: f64,
    /// Signed distance to each obstacle surface minus the robot radius.
    pub clearances: Vec<f64>,
    pub collision_active: bool,
    /// True when the controller failed and the previous command was reused.
    pub held: bool,
}

impl SimStep {
    pub fn clearance_min(&self) -> f64 {
        self.clearances.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct SimLog {
    pub dt: f64,
    pub steps: Vec<SimStep>,
    pub final_state: RobotState,
    pub controller: &'static str,
    /// Disturbance sampling mode, echoed so reports can flag the worst-case
    /// boundary choice.
    pub noise_mode: &'static str,
    /// Window length used for chunked boundary sampling.
    pub noise_window: usize,
    pub held_count: usize,
}

impl SimLog {
    /// Bitwise equality over everything except wall-clock fields.
    pub fn deterministic_eq(&self, other: &SimLog) -> bool {
        if self.steps.len() != other.steps.len()
            || self.dt != other.dt
            || self.final_state != other.final_state
            || self.held_count != other.held_count
        {
            return false;
        }
        self.steps.iter().zip(&other.steps).all(|(a, b)| {
            a.step == b.step
                && a.time == b.time
                && a.state == b.state
                && a.input == b.input
                && a.noise == b.noise
                && a.qp_iterations == b.qp_iterations
                && a.err_pos == b.err_pos
                && a.err_theta == b.err_theta
                && a.clearances == b.clearances
                && a.collision_active == b.collision_active
                && a.held == b.held
        })
    }

    pub fn min_clearance(&self) -> f64 {
        self.steps
            .iter()
            .map(SimStep::clearance_min)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Advances the true plant one sample under a fixed disturbance.
///
/// `Ideal` is the prediction model plus `w`. `DiffDriveMismatch` keeps the
/// kinematic rows of the prediction model but lets the velocity rows chase
/// the integrated commands through the first-order lag; as `tau -> 0` this
/// collapses back to the ideal plant.
pub fn plant_transition(
    s: &RobotState,
    u: &ControlInput,
    plant: &PlantModel,
    disc: &DiscretizationParams,
    w: &Vector5<f64>,
) -> RobotState {
    let ideal = integrate_step(s, u, disc);
    let mut next = match plant.mode {
        PlantMode::Ideal => ideal,
        PlantMode::DiffDriveMismatch => {
            let v_cmd = s.v + u.a * disc.dt;
            let omega_cmd = s.omega + u.alpha * disc.dt;
            let (v, omega) = diff_drive_response(s.v, s.omega, v_cmd, omega_cmd, disc.dt, &plant.dd);
            RobotState::new(ideal.x, ideal.y, ideal.theta, v, omega)
        }
    };
    next.x += w[0];
    next.y += w[1];
    next.theta += w[2];
    next.v += w[3];
    next.omega += w[4];
    next
}

/// Advances the plant one sample, drawing the disturbance per `noise_mode`
/// (single-step sets; closed-loop runs chunk boundary draws per horizon
/// window instead).
pub fn plant_step(
    s: &RobotState,
    u: &ControlInput,
    plant: &PlantModel,
    disc: &DiscretizationParams,
    rng: &mut ChaCha8Rng,
) -> (RobotState, Vector5<f64>) {
    let w = match plant.noise_mode {
        NoiseMode::Off => Vector5::zeros(),
        NoiseMode::Boundary => sample_disturbance_trajectory(&plant.noise, 1, true, rng)[0],
        NoiseMode::Interior => sample_disturbance_trajectory(&plant.noise, 1, false, rng)[0],
    };
    (plant_transition(s, u, plant, disc, &w), w)
}

/// Predicts where the measured state will be once the input now being
/// computed actually lands, by integrating the still-pending command.
pub fn delay_compensate(
    s_measured: &RobotState,
    u_pending: &ControlInput,
    delay: f64,
) -> RobotState {
    if delay <= 0.0 {
        return *s_measured;
    }
    let p = DiscretizationParams::new(delay, 1).expect("delay > 0 is a valid step");
    integrate_step(s_measured, u_pending, &p)
}

/// Draws the full disturbance sequence for a run up front. Boundary mode
/// draws independent horizon-length trajectories on the stacked ellipsoid
/// (each consecutive `window`-step chunk has stacked radius exactly 1);
/// interior mode draws per-step i.i.d. inside the single-step set.
fn draw_disturbances(
    noise: &NoiseModel,
    mode: NoiseMode,
    steps: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector5<f64>> {
    match mode {
        NoiseMode::Off => vec![Vector5::zeros(); steps],
        NoiseMode::Interior => (0..steps)
            .map(|_| sample_disturbance_trajectory(noise, 1, false, rng)[0])
            .collect(),
        NoiseMode::Boundary => {
            let mut out = Vec::with_capacity(steps);
            while out.len() < steps {
                let chunk = sample_disturbance_trajectory(noise, window, true, rng);
                let take = window.min(steps - out.len());
                out.extend_from_slice(&chunk[..take]);
            }
            out
        }
    }
}

/// Largest stacked-ellipsoid membership over aligned `window`-step chunks;
/// <= 1 + eps certifies the logged noise satisfies the bound the controller
/// assumed.
pub fn max_window_membership(ws: &[Vector5<f64>], noise: &NoiseModel, window: usize) -> f64 {
    if window == 0 {
        return 0.0;
    }
    ws.chunks(window)
        .map(|chunk| chunk.iter().map(|w| noise.membership_sq(w)).sum::<f64>())
        .fold(0.0, f64::max)
}

fn input_is_finite(u: &ControlInput) -> bool {
    u.a.is_finite() && u.alpha.is_finite()
}

/// Rolls the closed loop for `opts.steps` samples: delay-compensate, solve,
/// commit the first input, step the plant. Controller failures hold the
/// previous command and are flagged; everything except wall time is
/// deterministic in (seed, stream).
pub fn run_closed_loop(
    reference: &ReferenceTrajectory,
    plant: &PlantModel,
    ctx: &SolverContext,
    opts: &SimOptions,
) -> Result<SimLog> {
    if opts.steps == 0 {
        return Err(Error::Validation("closed loop needs steps >= 1".into()));
    }
    if !(opts.delay.is_finite() && opts.delay >= 0.0) {
        return Err(Error::Validation(format!(
            "delay must be finite and >= 0, got {}",
            opts.delay
        )));
    }
    let n = ctx.spec.n;
    let mode = match opts.controller {
        Controller::Zoro | Controller::Exact => TubeMode::Ellipsoidal,
        Controller::Nominal => TubeMode::Zero,
        Controller::ScalarTube(st) => TubeMode::Scalar(st),
    };
    let ctx = SolverContext { mode: &mode, ..*ctx };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(opts.stream);
    let disturbances = draw_disturbances(&plant.noise, plant.noise_mode, opts.steps, n, &mut rng);

    let mut s = opts.start;
    let mut warm: Option<Trajectory> = None;
    let mut last_input = ControlInput::zeros();
    let mut rows = Vec::with_capacity(opts.steps);
    let mut held_count = 0usize;

    for k in 0..opts.steps {
        let (win_states, win_inputs) = reference_window(reference, k, n);
        let s_ref = win_states[0];
        let window = Trajectory::new(win_states, win_inputs)?;
        let init = warm
            .as_ref()
            .map(Trajectory::shifted)
            .unwrap_or_else(|| window.clone());
        let s_pred = delay_compensate(&s, &last_input, opts.delay);

        let started = Instant::now();
        let solved: Result<OcpSolution> = match (opts.controller, opts.policy) {
            (Controller::Exact, _) => solve_exact_robust(&s_pred, Some(&init), &window, &ctx),
            (Controller::Nominal, SolvePolicy::RealTime) => {
                zoro_step(&s_pred, &init, &window, &ctx)
            }
            (Controller::Nominal, SolvePolicy::Converge) => {
                solve_nominal(&s_pred, Some(&init), &window, &ctx)
            }
            (_, SolvePolicy::RealTime) => zoro_step(&s_pred, &init, &window, &ctx),
            (_, SolvePolicy::Converge) => {
                zoro_solve_to_convergence(&s_pred, Some(&init), &window, &ctx)
            }
        };
        let solve_time = started.elapsed().as_secs_f64();

        let (input, qp_iterations, collision_active, held) = match solved {
            Ok(sol) if input_is_finite(&sol.first_input()) => {
                let u = sol.first_input();
                let active = sol.collision_active(ACTIVE_MU_TOL);
                warm = Some(sol.trajectory());
                (u, sol.qp_iterations, active, false)
            }
            _ => {
                held_count += 1;
                (last_input, 0, false, true)
            }
        };

        let err = state_error(&s, &s_ref);
        let clearances: Vec<f64> = ctx
            .spec
            .obstacles
            .iter()
            .map(|o| {
                let dist = ((s.x - o.cx).powi(2) + (s.y - o.cy).powi(2)).sqrt();
                dist - o.radius - ctx.spec.robot_radius
            })
            .collect();

        let w = disturbances[k];
        rows.push(SimStep {
            step: k,
            time: k as f64 * ctx.disc.dt,
            state: s,
            input,
            noise: w,
            qp_iterations,
            solve_time,
            err_pos: (err[0] * err[0] + err[1] * err[1]).sqrt(),
            err_theta: err[2],
            clearances,
            collision_active,
            held,
        });

        s = plant_transition(&s, &input, plant, ctx.disc, &w);
        last_input = input;
    }

    Ok(SimLog {
        dt: ctx.disc.dt,
        steps: rows,
        final_state: s,
        controller: opts.controller.label(),
        noise_mode: plant.noise_mode.label(),
        noise_window: n,
        held_count,
    })
}

/// Runs `runs` independent rollouts concurrently; run `i` uses RNG stream
/// `opts.stream + i`, so the batch is deterministic in the master seed and
/// unchanged by thread scheduling. Logs come back ordered by run index.
pub fn run_monte_carlo(
    reference: &ReferenceTrajectory,
    plant: &PlantModel,
    ctx: &SolverContext,
    opts: &SimOptions,
    runs: usize,
) -> Result<Vec<SimLog>> {
    (0..runs)
        .into_par_iter()
        .map(|i| {
            let run_opts = SimOptions {
                stream: opts.stream + i as u64,
                ..*opts
            };
            run_closed_loop(reference, plant, ctx, &run_opts)
        })
        .collect()
}

/// Five-number summary with exact order statistics: every value is an
/// element of the series; the median is the lower of the two middle
/// elements for even counts, quartiles sit at indices `(len-1)/4` and
/// `3*(len-1)/4` of the sorted series.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn from_series(series: &[f64]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Validation("quartiles need a non-empty series".into()));
        }
        let mut sorted = series.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("series must not contain NaN"));
        let last = sorted.len() - 1;
        Ok(Self {
            min: sorted[0],
            lower: sorted[last / 4],
            median: sorted[last / 2],
            upper: sorted[3 * last / 4],
            max: sorted[last],
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsSummary {
    pub err_pos_max: f64,
    pub err_pos_final: f64,
    /// First step from which the position error stays within
    /// `steady_bound`; `None` if it never settles.
    pub bound_entry_step: Option<usize>,
    /// 2x the windowed maximum position error over the final
    /// `steady_window` steps.
    pub steady_bound: f64,
    pub per_obstacle_min_clearance: Vec<f64>,
    pub min_clearance: f64,
    /// Distribution of the per-step minimum clearance.
    pub clearance: Option<Quartiles>,
    pub solve_time: Quartiles,
    pub held_steps: usize,
    pub collision_active_steps: usize,
}

/// Reduces a log to its summary. `steady_window` sets how many trailing
/// steps define "steady" for the bound-entry metric.
pub fn compute_metrics(log: &SimLog, steady_window: usize) -> Result<MetricsSummary> {
    if log.steps.is_empty() {
        return Err(Error::Validation("metrics need a non-empty log".into()));
    }
    let err_pos: Vec<f64> = log.steps.iter().map(|r| r.err_pos).collect();
    let tail = steady_window.clamp(1, err_pos.len());
    let steady_max = err_pos[err_pos.len() - tail..]
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    let steady_bound = 2.0 * steady_max;
    // Scan backwards for the last step outside the bound.
    let bound_entry_step = if steady_bound > 0.0 {
        match err_pos.iter().rposition(|e| *e > steady_bound) {
            Some(i) if i + 1 < err_pos.len() => Some(i + 1),
            Some(_) => None,
            None => Some(0),
        }
    } else {
        None
    };

    let n_obs = log.steps[0].clearances.len();
    let per_obstacle_min_clearance: Vec<f64> = (0..n_obs)
        .map(|j| {
            log.steps
                .iter()
                .map(|r| r.clearances[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let clearance = if n_obs > 0 {
        let mins: Vec<f64> = log.steps.iter().map(SimStep::clearance_min).collect();
        Some(Quartiles::from_series(&mins)?)
    } else {
        None
    };

    let solve_times: Vec<f64> = log.steps.iter().map(|r| r.solve_time).collect();
    Ok(MetricsSummary {
        err_pos_max: err_pos.iter().copied().fold(0.0, f64::max),
        err_pos_final: *err_pos.last().unwrap(),
        bound_entry_step,
        steady_bound,
        per_obstacle_min_clearance,
        min_clearance: clearance.map_or(f64::INFINITY, |q| q.min),
        clearance,
        solve_time: Quartiles::from_series(&solve_times)?,
        held_steps: log.held_count,
        collision_active_steps: log.steps.iter().filter(|r| r.collision_active).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{Bounds, Obstacle, OcpSpec, Weights};
    use crate::solver::ZoroSettings;
    use crate::tube::{feedback_gain, FeedbackGain, ShapeMatrix};
    use approx::assert_relative_eq;

    fn base_spec(n: usize, obstacles: Vec<Obstacle>) -> OcpSpec {
        OcpSpec {
            n,
            weights: Weights::from_diagonals(
                [5.0, 5.0, 1.0, 1.0, 1.0],
                [0.5, 0.5],
                [5.0, 5.0, 1.0, 1.0, 1.0],
            )
            .unwrap(),
            bounds: Bounds {
                v_min: -1.0,
                v_max: 1.0,
                omega_min: -2.0,
                omega_max: 2.0,
                a_min: -2.0,
                a_max: 2.0,
                alpha_min: -4.0,
                alpha_max: 4.0,
            },
            obstacles,
            robot_radius: 0.1,
            apply_accel_backoff: false,
        }
    }

    fn small_noise() -> NoiseModel {
        NoiseModel::from_std_devs([0.005, 0.005, 0.002, 0.02, 0.02]).unwrap()
    }

    fn straight_reference(disc: &DiscretizationParams, v: f64, len: usize) -> ReferenceTrajectory {
        let states: Vec<RobotState> = (0..=len)
            .map(|k| RobotState::new(v * disc.dt * k as f64, 0.0, 0.0, v, 0.0))
            .collect();
        let inputs = vec![ControlInput::zeros(); len];
        ReferenceTrajectory::new(disc.dt, states, inputs).unwrap()
    }

    struct Fixture {
        spec: OcpSpec,
        blocks: crate::ocp::ConstraintBlocks,
        disc: DiscretizationParams,
        gain: FeedbackGain,
        noise: NoiseModel,
        sigma0: ShapeMatrix,
        mode: TubeMode,
        settings: ZoroSettings,
    }

    impl Fixture {
        fn new(spec: OcpSpec, noise: NoiseModel) -> Self {
            let disc = DiscretizationParams::new(0.05, 1).unwrap();
            let dd = DiffDriveParams::new(0.3).unwrap();
            Self {
                blocks: crate::ocp::constraint_blocks(&spec),
                spec,
                gain: feedback_gain(&disc, &dd).unwrap(),
                disc,
                noise,
                sigma0: ShapeMatrix::zeros(),
                mode: TubeMode::Ellipsoidal,
                settings: ZoroSettings::default(),
            }
        }

        fn ctx(&self) -> SolverContext<'_> {
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
    }

    fn ideal_plant(noise: NoiseModel, noise_mode: NoiseMode) -> PlantModel {
        PlantModel {
            mode: PlantMode::Ideal,
            dd: DiffDriveParams::new(0.3).unwrap(),
            noise,
            noise_mode,
        }
    }

    #[test]
    fn plant_ideal_noise_off_matches_model() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let plant = ideal_plant(small_noise(), NoiseMode::Off);
        let s = RobotState::new(0.3, -0.2, 0.4, 0.7, -0.5);
        let u = ControlInput::new(0.6, -1.1);
        let next = plant_transition(&s, &u, &plant, &disc, &Vector5::zeros());
        assert_eq!(next, integrate_step(&s, &u, &disc));
    }

    #[test]
    fn plant_boundary_draw_sits_on_single_step_ellipsoid() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let noise = small_noise();
        let plant = ideal_plant(noise.clone(), NoiseMode::Boundary);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = RobotState::new(0.0, 0.0, 0.0, 0.5, 0.0);
        let u = ControlInput::new(0.1, 0.2);
        for _ in 0..20 {
            let (_, w) = plant_step(&s, &u, &plant, &disc, &mut rng);
            assert_relative_eq!(noise.membership_sq(&w), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mismatch_plant_with_tiny_tau_matches_ideal() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let mut plant = ideal_plant(small_noise(), NoiseMode::Off);
        plant.mode = PlantMode::DiffDriveMismatch;
        plant.dd = DiffDriveParams::new(1e-9).unwrap();
        let s = RobotState::new(0.1, 0.2, -0.3, 0.6, 0.8);
        let u = ControlInput::new(1.2, -0.9);
        let mismatch = plant_transition(&s, &u, &plant, &disc, &Vector5::zeros());
        let ideal = integrate_step(&s, &u, &disc);
        for i in 0..5 {
            assert!((mismatch.to_vector()[i] - ideal.to_vector()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatch_plant_lags_the_commanded_velocity() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let mut plant = ideal_plant(small_noise(), NoiseMode::Off);
        plant.mode = PlantMode::DiffDriveMismatch;
        let s = RobotState::new(0.0, 0.0, 0.0, 0.2, 0.0);
        let u = ControlInput::new(2.0, 0.0);
        let next = plant_transition(&s, &u, &plant, &disc, &Vector5::zeros());
        let v_cmd = s.v + u.a * disc.dt;
        assert!(next.v > s.v && next.v < v_cmd);
    }

    #[test]
    fn delay_zero_is_identity_and_dt_is_one_step() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let s = RobotState::new(0.4, 0.1, 0.3, 0.8, -0.2);
        let u = ControlInput::new(0.5, 0.7);
        assert_eq!(delay_compensate(&s, &u, 0.0), s);
        assert_eq!(delay_compensate(&s, &u, 0.05), integrate_step(&s, &u, &disc));
    }

    #[test]
    fn delay_composes_across_half_steps() {
        let s = RobotState::new(0.0, 0.0, 0.2, 0.5, 0.1);
        let u = ControlInput::new(0.2, 0.05);
        let full = delay_compensate(&s, &u, 0.05);
        let half = delay_compensate(&delay_compensate(&s, &u, 0.025), &u, 0.025);
        for i in 0..5 {
            assert!((full.to_vector()[i] - half.to_vector()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_chunks_have_unit_membership() {
        let noise = small_noise();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ws = draw_disturbances(&noise, NoiseMode::Boundary, 47, 10, &mut rng);
        assert_eq!(ws.len(), 47);
        // Full chunks land exactly on the boundary; the truncated tail stays
        // inside.
        for chunk in ws.chunks(10).take(4) {
            let m: f64 = chunk.iter().map(|w| noise.membership_sq(w)).sum();
            assert_relative_eq!(m, 1.0, epsilon = 1e-12);
        }
        assert!(max_window_membership(&ws, &noise, 10) <= 1.0 + 1e-12);
    }

    #[test]
    fn noise_free_nominal_tracks_reference_exactly() {
        let fx = Fixture::new(base_spec(12, vec![]), small_noise());
        let reference = straight_reference(&fx.disc, 0.6, 260);
        let plant = ideal_plant(small_noise(), NoiseMode::Off);
        let opts = SimOptions::new(
            Controller::Nominal,
            200,
            RobotState::new(0.0, 0.0, 0.0, 0.6, 0.0),
            1,
        );
        let log = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        let worst = log.steps.iter().map(|r| r.err_pos).fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "max tracking error {worst} on the exact plant");
        assert_eq!(log.held_count, 0);
    }

    #[test]
    fn closed_loop_is_deterministic_per_seed() {
        let fx = Fixture::new(base_spec(8, vec![]), small_noise());
        let reference = straight_reference(&fx.disc, 0.5, 60);
        let plant = ideal_plant(small_noise(), NoiseMode::Boundary);
        let opts = SimOptions::new(
            Controller::Zoro,
            25,
            RobotState::new(0.0, 0.02, 0.0, 0.5, 0.0),
            42,
        );
        let a = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        let b = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        assert!(a.deterministic_eq(&b));
        let other = SimOptions { seed: 43, ..opts };
        let c = run_closed_loop(&reference, &plant, &fx.ctx(), &other).unwrap();
        assert!(!a.deterministic_eq(&c));
    }

    #[test]
    fn logged_noise_respects_window_bound() {
        let fx = Fixture::new(base_spec(8, vec![]), small_noise());
        let reference = straight_reference(&fx.disc, 0.5, 60);
        let plant = ideal_plant(small_noise(), NoiseMode::Boundary);
        let opts = SimOptions::new(
            Controller::Zoro,
            40,
            RobotState::new(0.0, 0.0, 0.0, 0.5, 0.0),
            9,
        );
        let log = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        let ws: Vec<Vector5<f64>> = log.steps.iter().map(|r| r.noise).collect();
        assert!(max_window_membership(&ws, &fx.noise, log.noise_window) <= 1.0 + 1e-12);
    }

    #[test]
    fn monte_carlo_streams_are_independent_and_ordered() {
        let fx = Fixture::new(base_spec(8, vec![]), small_noise());
        let reference = straight_reference(&fx.disc, 0.5, 50);
        let plant = ideal_plant(small_noise(), NoiseMode::Boundary);
        let opts = SimOptions::new(
            Controller::Zoro,
            12,
            RobotState::new(0.0, 0.0, 0.0, 0.5, 0.0),
            5,
        );
        let batch = run_monte_carlo(&reference, &plant, &fx.ctx(), &opts, 4).unwrap();
        assert_eq!(batch.len(), 4);
        // Each run must match a sequential rerun of its own stream.
        for (i, log) in batch.iter().enumerate() {
            let solo = SimOptions { stream: i as u64, ..opts };
            let again = run_closed_loop(&reference, &plant, &fx.ctx(), &solo).unwrap();
            assert!(log.deterministic_eq(&again), "run {i} not reproducible");
        }
        assert!(!batch[0].deterministic_eq(&batch[1]));
    }

    #[test]
    fn quartiles_match_hand_order_statistics() {
        let q = Quartiles::from_series(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            (q.min, q.lower, q.median, q.upper, q.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        let even = Quartiles::from_series(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(even.median, 2.0);
        let flat = Quartiles::from_series(&[7.0; 9]).unwrap();
        assert_eq!(
            (flat.min, flat.lower, flat.median, flat.upper, flat.max),
            (7.0, 7.0, 7.0, 7.0, 7.0)
        );
    }

    #[test]
    fn metrics_report_violation_and_steady_bound() {
        let disc = DiscretizationParams::new(0.05, 1).unwrap();
        let mk = |step: usize, err: f64, clearance: f64| SimStep {
            step,
            time: step as f64 * disc.dt,
            state: RobotState::zeros(),
            input: ControlInput::zeros(),
            noise: Vector5::zeros(),
            qp_iterations: 2,
            solve_time: 1e-3 + step as f64 * 1e-5,
            err_pos: err,
            err_theta: 0.0,
            clearances: vec![clearance],
            collision_active: false,
            held: false,
        };
        let mut steps: Vec<SimStep> = (0..40).map(|k| mk(k, 0.5 / (k + 1) as f64, 1.0)).collect();
        steps[20].clearances[0] = -0.02;
        let log = SimLog {
            dt: disc.dt,
            steps,
            final_state: RobotState::zeros(),
            controller: "zoro",
            noise_mode: "off",
            noise_window: 8,
            held_count: 0,
        };
        let m = compute_metrics(&log, 10).unwrap();
        assert!(m.min_clearance < 0.0);
        assert_eq!(m.per_obstacle_min_clearance, vec![-0.02]);
        // err series decays monotonically: the steady bound is 2x the error
        // 10 steps from the end, and entry happens once errors fall below it.
        let bound = 2.0 * (0.5 / 31.0);
        assert_relative_eq!(m.steady_bound, bound, epsilon = 1e-12);
        let entry = m.bound_entry_step.unwrap();
        assert!(log.steps[entry..].iter().all(|r| r.err_pos <= bound));
        assert!(log.steps[entry - 1].err_pos > bound);
        assert_eq!(m.held_steps, 0);
    }

    #[test]
    fn zoro_clears_an_obstacle_the_reference_ignores() {
        let obstacle = Obstacle { cx: 0.6, cy: 0.05, radius: 0.05 };
        let fx = Fixture::new(base_spec(20, vec![obstacle]), small_noise());
        let reference = straight_reference(&fx.disc, 0.9, 80);
        let plant = ideal_plant(small_noise(), NoiseMode::Boundary);
        let opts = SimOptions::new(
            Controller::Zoro,
            45,
            RobotState::new(0.0, 0.0, 0.0, 0.9, 0.0),
            11,
        );
        let log = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        assert_eq!(log.held_count, 0);
        assert!(
            log.min_clearance() >= 0.0,
            "clearance dipped to {}",
            log.min_clearance()
        );
        assert!(log.steps.iter().any(|r| r.collision_active));
    }

    #[test]
    fn scalar_tube_controller_runs_with_inflated_backoffs() {
        let obstacle = Obstacle { cx: 0.6, cy: 0.05, radius: 0.05 };
        let fx = Fixture::new(base_spec(20, vec![obstacle]), small_noise());
        let reference = straight_reference(&fx.disc, 0.9, 80);
        let plant = ideal_plant(small_noise(), NoiseMode::Off);
        let st = ScalarTube::step_from_noise(1.0, &fx.noise).unwrap();
        let zoro_opts = SimOptions::new(
            Controller::Zoro,
            40,
            RobotState::new(0.0, 0.0, 0.0, 0.9, 0.0),
            2,
        );
        let scalar_opts = SimOptions {
            controller: Controller::ScalarTube(st),
            ..zoro_opts
        };
        let zoro = run_closed_loop(&reference, &plant, &fx.ctx(), &zoro_opts).unwrap();
        let scalar = run_closed_loop(&reference, &plant, &fx.ctx(), &scalar_opts).unwrap();
        let lateral = |log: &SimLog| {
            log.steps
                .iter()
                .map(|r| r.state.y.abs())
                .fold(0.0f64, f64::max)
        };
        // The sphere radius dominates the ellipsoid's lateral extent, so the
        // baseline must swing at least as wide.
        assert!(lateral(&scalar) >= lateral(&zoro));
    }

    #[test]
    fn held_command_fallback_flags_failures() {
        // A NaN poisoning one reference state is the cheapest reproducible
        // controller failure; it enters the window only once index 10 is in
        // reach, so the loop must solve, then hold, then recover.
        let fx = Fixture::new(base_spec(4, vec![]), small_noise());
        let disc = fx.disc;
        let mut states: Vec<RobotState> =
            (0..=30).map(|k| RobotState::new(0.1 * k as f64, 0.0, 0.0, 0.5, 0.0)).collect();
        states[10] = RobotState::new(f64::NAN, 0.0, 0.0, 0.5, 0.0);
        let inputs = vec![ControlInput::zeros(); 30];
        let reference = ReferenceTrajectory::new(disc.dt, states, inputs).unwrap();
        let plant = ideal_plant(small_noise(), NoiseMode::Off);
        let opts = SimOptions::new(
            Controller::Nominal,
            8,
            RobotState::new(0.0, 0.0, 0.0, 0.5, 0.0),
            1,
        );
        let log = run_closed_loop(&reference, &plant, &fx.ctx(), &opts).unwrap();
        assert!(log.held_count > 0);
        let first_held = log.steps.iter().position(|r| r.held).unwrap();
        assert!(first_held > 0, "early steps see no NaN and must solve");
        assert_eq!(
            log.steps[first_held].input,
            log.steps[first_held - 1].input,
            "held step must reuse the previous command"
        );
    }

    #[test]
    fn interior_noise_stays_strictly_inside_per_step() {
        let noise = small_noise();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ws = draw_disturbances(&noise, NoiseMode::Interior, 200, 8, &mut rng);
        for w in &ws {
            assert!(noise.membership_sq(w) <= 1.0 + 1e-12);
        }
        // i.i.d. per step: no chunk structure, most draws strictly interior.
        let strict = ws.iter().filter(|w| noise.membership_sq(w) < 0.99).count();
        assert!(strict > 100);
    }
}
