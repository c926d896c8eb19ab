//! The robust tracking controller: Gauss-Newton SQP on the fixed-backoff
//! subproblem, condensed to input space, interleaved with tube/backoff
//! refreshes on a configurable per-sample schedule.
//!
//! Within one QP the ellipsoidal sets are data, not variables: constraint
//! rows are tightened by fixed backoffs, the QP is solved, and the tube is
//! re-propagated around the new iterate before the next solve. Convergence
//! mode repeats the alternation until both the QP step and the backoff
//! refresh stall.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix5, Matrix5x2, Vector2, Vector5};

use crate::error::{Error, Result};
use crate::model::{
    integrate_with_sensitivities, ControlInput, DiscretizationParams, RobotState, N_INPUTS,
    N_STATES,
};
use crate::ocp::{
    collision_constraint, state_error, ConstraintBlocks, OcpSpec, RowKind, RowTemplate,
};
use crate::qp::{dmatrix_from_rows, DenseQp};
use crate::tube::{
    backoff, propagate_trajectory, terminal_backoff, FeedbackGain, NoiseModel, ScalarTube,
    ShapeMatrix,
};

/// Iteration schedule, tolerances, and soft-constraint penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoroSettings {
    /// QP solves per control sample (real-time mode).
    pub qp_iterations_per_sample: usize,
    /// Backoff refreshes per control sample, interleaved before the solves.
    pub backoff_updates_per_sample: usize,
    /// Outer alternation cap in convergence mode.
    pub max_outer_iterations: usize,
    /// Inner fixed-backoff SQP cap per outer iteration.
    pub max_inner_iterations: usize,
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    /// Hessian regularization added to the condensed diagonal.
    pub levenberg: f64,
    pub slack_penalty_l1: f64,
    pub slack_penalty_l2: f64,
    /// Collision rows within this of their tightened boundary get slack
    /// variables; farther rows stay hard.
    pub slack_margin: f64,
}

impl Default for ZoroSettings {
    fn default() -> Self {
        Self {
            qp_iterations_per_sample: 2,
            backoff_updates_per_sample: 2,
            max_outer_iterations: 100,
            max_inner_iterations: 50,
            tol_stationarity: 1e-8,
            tol_feasibility: 1e-8,
            levenberg: 1e-8,
            slack_penalty_l1: 1e4,
            slack_penalty_l2: 1e4,
            slack_margin: 1.0,
        }
    }
}

impl ZoroSettings {
    pub fn validate(&self) -> Result<()> {
        if self.qp_iterations_per_sample < 1 || self.backoff_updates_per_sample < 1 {
            return Err(Error::Validation(
                "qp_iterations_per_sample and backoff_updates_per_sample must be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("tol_stationarity", self.tol_stationarity),
            ("tol_feasibility", self.tol_feasibility),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Validation(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("levenberg", self.levenberg),
            ("slack_penalty_l1", self.slack_penalty_l1),
            ("slack_penalty_l2", self.slack_penalty_l2),
            ("slack_margin", self.slack_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.max_outer_iterations < 1 || self.max_inner_iterations < 1 {
            return Err(Error::Validation("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// How constraint tightening is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum TubeMode {
    /// Full shape-matrix recursion.
    Ellipsoidal,
    /// No tightening: the nominal controller.
    Zero,
    /// Hypersphere radii on collision rows; affine rows keep their exact
    /// (trajectory-independent) ellipsoidal backoffs so the actuator boxes
    /// stay feasible.
    Scalar(ScalarTube),
}

/// A state/input trajectory over one horizon: `N + 1` states, `N` inputs.
/// Doubles as the reference window and the SQP iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<RobotState>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn new(states: Vec<RobotState>, inputs: Vec<ControlInput>) -> Result<Self> {
        if states.is_empty() || inputs.len() + 1 != states.len() {
            return Err(Error::Validation(format!(
                "trajectory needs inputs.len() + 1 == states.len(), got {} + 1 != {}",
                inputs.len(),
                states.len()
            )));
        }
        Ok(Self { states, inputs })
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Warm-start shift: drop the first stage, duplicate the last.
    pub fn shifted(&self) -> Self {
        let n = self.horizon();
        let mut states: Vec<RobotState> = self.states[1..].to_vec();
        states.push(*states.last().unwrap());
        let mut inputs: Vec<ControlInput> = self.inputs[1..].to_vec();
        inputs.push(if n > 0 { self.inputs[n - 1] } else { ControlInput::zeros() });
        Self { states, inputs }
    }
}

/// Shared, immutable problem data threaded through the solver entry points.
#[derive(Clone, Copy)]
pub struct SolverContext<'a> {
    pub spec: &'a OcpSpec,
    pub blocks: &'a ConstraintBlocks,
    pub disc: &'a DiscretizationParams,
    pub gain: &'a FeedbackGain,
    pub noise: &'a NoiseModel,
    pub sigma0: &'a ShapeMatrix,
    pub mode: &'a TubeMode,
    pub settings: &'a ZoroSettings,
}

/// Position of one flattened constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowEntry {
    pub stage: usize,
    pub terminal: bool,
    pub template: usize,
}

/// Deterministic row order: all stage rows for k = 0..N-1, then the terminal
/// rows at stage N.
pub fn row_layout(blocks: &ConstraintBlocks, n: usize) -> Vec<RowEntry> {
    let mut rows = Vec::with_capacity(n * blocks.stage.len() + blocks.terminal.len());
    for stage in 0..n {
        for template in 0..blocks.stage.len() {
            rows.push(RowEntry { stage, terminal: false, template });
        }
    }
    for template in 0..blocks.terminal.len() {
        rows.push(RowEntry { stage: n, terminal: true, template });
    }
    rows
}

pub fn row_template<'a>(blocks: &'a ConstraintBlocks, entry: &RowEntry) -> &'a RowTemplate {
    if entry.terminal {
        &blocks.terminal[entry.template]
    } else {
        &blocks.stage[entry.template]
    }
}

/// A stage-0 state-only row constrains the fixed initial state: it is
/// reported but cannot enter the QP.
pub fn row_is_fixed(entry: &RowEntry, template: &RowTemplate) -> bool {
    entry.stage == 0 && !entry.terminal && template.kind != RowKind::AffineInput
}

/// One row linearized at the current iterate.
struct RowLin {
    grad_s: Vector5<f64>,
    grad_u: Vector2<f64>,
    value: f64,
}

/// Collision linearization with a deterministic fallback for the
/// center-singular pose: reuse the direction from the nearest non-singular
/// stage, or +x if every stage is singular. Never triggered in normal runs.
fn collision_with_fallback(
    traj: &Trajectory,
    stage: usize,
    obs_idx: usize,
    spec: &OcpSpec,
) -> (f64, Vector5<f64>) {
    let obs = &spec.obstacles[obs_idx];
    match collision_constraint(&traj.states[stage], obs, spec.robot_radius) {
        Ok(hg) => hg,
        Err(_) => {
            let r_sum = obs.radius + spec.robot_radius;
            for offset in 1..=traj.horizon() {
                for k in [stage.checked_sub(offset), Some(stage + offset)].into_iter().flatten() {
                    if k <= traj.horizon() {
                        if let Ok((_, g)) = collision_constraint(&traj.states[k], obs, spec.robot_radius) {
                            return (r_sum, g);
                        }
                    }
                }
            }
            (r_sum, Vector5::new(-1.0, 0.0, 0.0, 0.0, 0.0))
        }
    }
}

/// Untightened value of one row at a trajectory.
pub fn row_value(entry: &RowEntry, template: &RowTemplate, traj: &Trajectory, spec: &OcpSpec) -> f64 {
    linearize_row(entry, template, traj, spec).value
}

/// Exact row gradients at a trajectory: the state part at the row's own
/// stage and the input part for stage rows.
pub fn row_gradients(
    entry: &RowEntry,
    template: &RowTemplate,
    traj: &Trajectory,
    spec: &OcpSpec,
) -> (Vector5<f64>, Vector2<f64>) {
    let lin = linearize_row(entry, template, traj, spec);
    (lin.grad_s, lin.grad_u)
}

fn linearize_row(entry: &RowEntry, template: &RowTemplate, traj: &Trajectory, spec: &OcpSpec) -> RowLin {
    match template.kind {
        RowKind::AffineState | RowKind::AffineInput => {
            let u = if entry.terminal { ControlInput::zeros() } else { traj.inputs[entry.stage] };
            RowLin {
                grad_s: template.grad_s,
                grad_u: template.grad_u,
                value: template.affine_value(&traj.states[entry.stage], &u),
            }
        }
        RowKind::Collision(obs_idx) => {
            let (h, g) = collision_with_fallback(traj, entry.stage, obs_idx, spec);
            RowLin { grad_s: g, grad_u: Vector2::zeros(), value: h }
        }
    }
}

/// Tube trajectory and per-row tightenings frozen for the next QP solve.
#[derive(Debug, Clone)]
pub struct TubeState {
    pub sigmas: Vec<ShapeMatrix>,
    pub backoffs: Vec<f64>,
}

impl TubeState {
    /// All-zero tightening (nominal problem).
    pub fn zero(blocks: &ConstraintBlocks, n: usize) -> Self {
        Self {
            sigmas: vec![ShapeMatrix::zeros(); n + 1],
            backoffs: vec![0.0; row_layout(blocks, n).len()],
        }
    }
}

fn stage_jacobians(
    traj: &Trajectory,
    disc: &DiscretizationParams,
) -> (Vec<(Matrix5<f64>, Matrix5x2<f64>)>, Vec<Vector5<f64>>) {
    let n = traj.horizon();
    let mut jacs = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for k in 0..n {
        let (next, a, b) = integrate_with_sensitivities(&traj.states[k], &traj.inputs[k], disc);
        jacs.push((a, b));
        residuals.push(next.to_vector() - traj.states[k + 1].to_vector());
    }
    (jacs, residuals)
}

/// Re-propagates the tube around the iterate and recomputes every row's
/// backoff. Acceleration rows keep zero backoff unless `apply_accel_backoff`
/// is set.
pub fn update_backoffs(traj: &Trajectory, ctx: &SolverContext) -> Result<TubeState> {
    let n = traj.horizon();
    let layout = row_layout(ctx.blocks, n);
    if matches!(ctx.mode, TubeMode::Zero) {
        return Ok(TubeState::zero(ctx.blocks, n));
    }

    let (jacs, _) = stage_jacobians(traj, ctx.disc);
    let sigmas = propagate_trajectory(ctx.sigma0, &jacs, ctx.gain, ctx.noise);

    let mut backoffs = Vec::with_capacity(layout.len());
    for entry in &layout {
        let template = row_template(ctx.blocks, entry);
        let beta = match (&template.kind, ctx.mode) {
            (RowKind::Collision(_), TubeMode::Scalar(st)) => st.radius(entry.stage),
            (RowKind::AffineInput, _) if !ctx.spec.apply_accel_backoff => 0.0,
            _ => {
                let lin = linearize_row(entry, template, traj, ctx.spec);
                let sigma = &sigmas[entry.stage];
                if entry.terminal {
                    terminal_backoff(&lin.grad_s, sigma)?
                } else {
                    backoff(&lin.grad_s, &lin.grad_u, ctx.gain, sigma)?
                }
            }
        };
        backoffs.push(beta);
    }
    Ok(TubeState { sigmas, backoffs })
}

/// State-elimination data: `ds_k = m[k] du + t[k]` with `ds_0 = 0`.
pub struct Condensing {
    pub m: Vec<DMatrix<f64>>,
    pub t: Vec<Vector5<f64>>,
}

fn condense(
    jacs: &[(Matrix5<f64>, Matrix5x2<f64>)],
    residuals: &[Vector5<f64>],
    n: usize,
) -> Condensing {
    let nu = N_INPUTS * n;
    let mut m = Vec::with_capacity(n + 1);
    let mut t = Vec::with_capacity(n + 1);
    m.push(DMatrix::zeros(N_STATES, nu));
    t.push(Vector5::zeros());
    for k in 0..n {
        let (a, b) = &jacs[k];
        let mut mk = {
            let prev = &m[k];
            let mut out = DMatrix::zeros(N_STATES, nu);
            // out = a * prev, written per column to stay in fixed-size ops.
            for j in 0..nu {
                let col = Vector5::from_iterator(prev.column(j).iter().copied());
                out.column_mut(j).copy_from(&(a * col));
            }
            out
        };
        for i in 0..N_STATES {
            for j in 0..N_INPUTS {
                mk[(i, N_INPUTS * k + j)] += b[(i, j)];
            }
        }
        let tk = a * t[k] + residuals[k];
        m.push(mk);
        t.push(tk);
    }
    Condensing { m, t }
}

/// Which DenseQp row a solver row became, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QpRowId {
    Constraint(usize),
    SlackNonneg(usize),
}

/// Metadata for one flattened constraint row inside a built QP.
#[derive(Debug, Clone)]
pub struct QpRowMeta {
    pub entry: RowEntry,
    pub kind: RowKind,
    pub name: String,
    pub grad_s: Vector5<f64>,
    pub grad_u: Vector2<f64>,
    /// Constraint value at the linearization point (untightened).
    pub value: f64,
    pub backoff: f64,
    /// Index of this row's slack variable, if it was softened.
    pub slack_var: Option<usize>,
    /// Stage-0 state-only rows are excluded from the QP.
    pub fixed: bool,
}

/// The condensed fixed-backoff QP around one iterate, plus everything needed
/// to expand its solution back to the full space.
pub struct QProblem {
    pub qp: DenseQp,
    pub n: usize,
    pub nu: usize,
    pub n_slack: usize,
    pub meta: Vec<QpRowMeta>,
    qp_rows: Vec<QpRowId>,
    pub cond: Condensing,
    pub jacs: Vec<(Matrix5<f64>, Matrix5x2<f64>)>,
    pub residuals: Vec<Vector5<f64>>,
    pub hs: Vec<Matrix5<f64>>,
    pub gs: Vec<Vector5<f64>>,
    pub hr: Vec<Matrix2<f64>>,
    pub gu: Vec<Vector2<f64>>,
}

/// Builds the Gauss-Newton QP of the fixed-backoff problem around `traj`:
/// quadratic tracking cost blocks, linearized dynamics condensed into input
/// space, and every inequality row tightened by its frozen backoff. With all
/// backoffs zero this is exactly the nominal tracking QP.
pub fn build_qp(
    traj: &Trajectory,
    window: &Trajectory,
    tube: &TubeState,
    ctx: &SolverContext,
) -> Result<QProblem> {
    build_qp_inner(traj, window, tube, ctx, ctx.settings.slack_margin)
}

fn build_qp_inner(
    traj: &Trajectory,
    window: &Trajectory,
    tube: &TubeState,
    ctx: &SolverContext,
    slack_margin: f64,
) -> Result<QProblem> {
    let n = traj.horizon();
    if window.horizon() != n {
        return Err(Error::Validation(format!(
            "window horizon {} does not match iterate horizon {n}",
            window.horizon()
        )));
    }
    let nu = N_INPUTS * n;
    let layout = row_layout(ctx.blocks, n);
    if tube.backoffs.len() != layout.len() {
        return Err(Error::Validation(format!(
            "backoff vector length {} does not match row count {}",
            tube.backoffs.len(),
            layout.len()
        )));
    }

    let (jacs, residuals) = stage_jacobians(traj, ctx.disc);
    let cond = condense(&jacs, &residuals, n);

    // Gauss-Newton cost blocks: H blocks 2Q / 2R / 2Q_e, gradients through
    // the wrapped tracking error.
    let w = &ctx.spec.weights;
    let mut hs = Vec::with_capacity(n + 1);
    let mut gs = Vec::with_capacity(n + 1);
    let mut hr = Vec::with_capacity(n);
    let mut gu = Vec::with_capacity(n);
    for k in 0..=n {
        let (qmat, err) = if k == n {
            (w.q_e, state_error(&traj.states[k], &window.states[k]))
        } else {
            (w.q, state_error(&traj.states[k], &window.states[k]))
        };
        hs.push(qmat * 2.0);
        gs.push(qmat * err * 2.0);
    }
    for k in 0..n {
        let du = traj.inputs[k].to_vector() - window.inputs[k].to_vector();
        hr.push(w.r * 2.0);
        gu.push(w.r * du * 2.0);
    }

    // Condensed Hessian and gradient over du.
    let mut h = DMatrix::<f64>::zeros(nu, nu);
    let mut g = DVector::<f64>::zeros(nu);
    for k in 0..=n {
        let mk = &cond.m[k];
        if k >= 1 {
            let hm = {
                let mut out = DMatrix::zeros(N_STATES, nu);
                for j in 0..nu {
                    let col = Vector5::from_iterator(mk.column(j).iter().copied());
                    out.column_mut(j).copy_from(&(hs[k] * col));
                }
                out
            };
            h += mk.transpose() * &hm;
            let rhs = hs[k] * cond.t[k] + gs[k];
            g += mk.transpose() * DVector::from_row_slice(rhs.as_slice());
        }
    }
    for k in 0..n {
        for i in 0..N_INPUTS {
            for j in 0..N_INPUTS {
                h[(N_INPUTS * k + i, N_INPUTS * k + j)] += hr[k][(i, j)];
            }
            g[N_INPUTS * k + i] += gu[k][i];
        }
    }

    // Rows: linearize, tighten, decide softness.
    let mut meta = Vec::with_capacity(layout.len());
    let mut n_slack = 0usize;
    for (idx, entry) in layout.iter().enumerate() {
        let template = row_template(ctx.blocks, entry);
        let lin = linearize_row(entry, template, traj, ctx.spec);
        let fixed = row_is_fixed(entry, template);
        let beta = tube.backoffs[idx];
        let soft = !fixed
            && template.kind.is_collision()
            && lin.value + beta >= -slack_margin;
        let slack_var = if soft {
            n_slack += 1;
            Some(n_slack - 1)
        } else {
            None
        };
        meta.push(QpRowMeta {
            entry: *entry,
            kind: template.kind,
            name: template.name.clone(),
            grad_s: lin.grad_s,
            grad_u: lin.grad_u,
            value: lin.value,
            backoff: beta,
            slack_var,
            fixed,
        });
    }

    let nx = nu + n_slack;
    let mut h_full = DMatrix::<f64>::zeros(nx, nx);
    h_full.view_mut((0, 0), (nu, nu)).copy_from(&h);
    let mut g_full = DVector::<f64>::zeros(nx);
    g_full.rows_mut(0, nu).copy_from(&g);
    for ell in 0..n_slack {
        h_full[(nu + ell, nu + ell)] = 2.0 * ctx.settings.slack_penalty_l2;
        g_full[nu + ell] = ctx.settings.slack_penalty_l1;
    }
    for i in 0..nx {
        h_full[(i, i)] += ctx.settings.levenberg;
    }

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut qp_rows: Vec<QpRowId> = Vec::new();
    for (idx, m) in meta.iter().enumerate() {
        if m.fixed {
            continue;
        }
        let k = m.entry.stage;
        let mut row = DVector::<f64>::zeros(nx);
        // State part through the condensing map.
        if m.grad_s != Vector5::zeros() {
            let mk = &cond.m[k];
            for j in 0..nu {
                let col = Vector5::from_iterator(mk.column(j).iter().copied());
                row[j] += m.grad_s.dot(&col);
            }
        }
        if !m.entry.terminal && m.grad_u != Vector2::zeros() {
            for j in 0..N_INPUTS {
                row[N_INPUTS * k + j] += m.grad_u[j];
            }
        }
        if let Some(ell) = m.slack_var {
            row[nu + ell] = -1.0;
        }
        let bound = -m.value - m.backoff - m.grad_s.dot(&cond.t[k]);
        qp_rows.push(QpRowId::Constraint(idx));
        rows.push(row);
        rhs.push(bound);
    }
    for ell in 0..n_slack {
        let mut row = DVector::<f64>::zeros(nx);
        row[nu + ell] = -1.0;
        qp_rows.push(QpRowId::SlackNonneg(ell));
        rows.push(row);
        rhs.push(0.0);
    }

    let qp = DenseQp::new(h_full, g_full, dmatrix_from_rows(&rows, nx), DVector::from_vec(rhs))?;
    Ok(QProblem {
        qp,
        n,
        nu,
        n_slack,
        meta,
        qp_rows,
        cond,
        jacs,
        residuals,
        hs,
        gs,
        hr,
        gu,
    })
}

/// Expanded result of one QP solve.
pub struct QpStep {
    pub traj: Trajectory,
    pub delta_u: DVector<f64>,
    pub delta_s: Vec<Vector5<f64>>,
    /// Multiplier per flattened row (zero for fixed rows).
    pub mu: Vec<f64>,
    /// Slack value per flattened row (zero for hard rows).
    pub slack: Vec<f64>,
    /// Dynamics multipliers: `lambda[k]` pairs with the defect ending at
    /// stage k; `lambda[0]` belongs to the pinned initial state.
    pub lambda: Vec<Vector5<f64>>,
    pub step_norm: f64,
    pub qp_iterations: usize,
    pub active_rows: usize,
}

/// Solves the built QP and expands the step back to a full trajectory, with
/// multipliers recovered for every stage.
pub fn solve_qp_step(problem: &QProblem, traj: &Trajectory) -> Result<QpStep> {
    let sol = problem.qp.solve()?;
    expand_step(problem, traj, &sol.x, &sol.mu, sol.iterations, sol.active.len())
}

fn expand_step(
    problem: &QProblem,
    traj: &Trajectory,
    x: &DVector<f64>,
    mu_qp: &DVector<f64>,
    qp_iterations: usize,
    active_rows: usize,
) -> Result<QpStep> {
    let n = problem.n;
    let nu = problem.nu;
    let delta_u = x.rows(0, nu).into_owned();

    let mut delta_s = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mk = &problem.cond.m[k];
        let mut ds = problem.cond.t[k];
        for j in 0..nu {
            let col = Vector5::from_iterator(mk.column(j).iter().copied());
            ds += col * delta_u[j];
        }
        delta_s.push(ds);
    }

    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        states.push(RobotState::from_vector(&(traj.states[k].to_vector() + delta_s[k])));
    }
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        inputs.push(ControlInput::new(
            traj.inputs[k].a + delta_u[N_INPUTS * k],
            traj.inputs[k].alpha + delta_u[N_INPUTS * k + 1],
        ));
    }

    let mut mu = vec![0.0; problem.meta.len()];
    for (qp_idx, id) in problem.qp_rows.iter().enumerate() {
        if let QpRowId::Constraint(meta_idx) = id {
            mu[*meta_idx] = mu_qp[qp_idx];
        }
    }
    let mut slack = vec![0.0; problem.meta.len()];
    for (meta_idx, m) in problem.meta.iter().enumerate() {
        if let Some(ell) = m.slack_var {
            slack[meta_idx] = x[nu + ell];
        }
    }

    // Backward multiplier recovery from QP stationarity in the states.
    let mut lambda = vec![Vector5::zeros(); n + 1];
    let grad_rows_at = |k: usize| -> Vector5<f64> {
        let mut acc = Vector5::zeros();
        for (idx, m) in problem.meta.iter().enumerate() {
            if m.entry.stage == k && mu[idx] != 0.0 {
                acc += m.grad_s * mu[idx];
            }
        }
        acc
    };
    lambda[n] = problem.hs[n] * delta_s[n] + problem.gs[n] + grad_rows_at(n);
    for k in (1..n).rev() {
        let (a, _) = &problem.jacs[k];
        lambda[k] = problem.hs[k] * delta_s[k]
            + problem.gs[k]
            + a.transpose() * lambda[k + 1]
            + grad_rows_at(k);
    }
    if n >= 1 {
        let (a0, _) = &problem.jacs[0];
        lambda[0] = problem.gs[0] + a0.transpose() * lambda[1] + grad_rows_at(0);
    }

    let step_norm = delta_u
        .amax()
        .max(delta_s.iter().map(|d| d.amax()).fold(0.0, f64::max));

    Ok(QpStep {
        traj: Trajectory { states, inputs },
        delta_u,
        delta_s,
        mu,
        slack,
        lambda,
        step_norm,
        qp_iterations,
        active_rows,
    })
}

/// One row of the reported solution.
#[derive(Debug, Clone)]
pub struct RowRecord {
    pub stage: usize,
    pub terminal: bool,
    pub kind: RowKind,
    pub name: String,
    /// Constraint value at the solution (untightened; feasible iff <= 0).
    pub value: f64,
    pub backoff: f64,
    pub mu: f64,
    pub slack: f64,
    /// True for stage-0 state-only rows, which the optimizer cannot move.
    pub fixed: bool,
}

/// Max-norm KKT residuals of the fixed-backoff problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

/// Solver output: trajectory, multipliers, tube, per-row diagnostics.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub states: Vec<RobotState>,
    pub inputs: Vec<ControlInput>,
    pub lambdas: Vec<Vector5<f64>>,
    pub rows: Vec<RowRecord>,
    pub sigmas: Vec<ShapeMatrix>,
    pub kkt: KktResiduals,
    /// Tracking objective at the solution (no slack penalties).
    pub objective: f64,
    pub qp_iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub step_norm: f64,
    pub backoff_change: f64,
    pub max_slack: f64,
}

impl OcpSolution {
    pub fn first_input(&self) -> ControlInput {
        self.inputs[0]
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory { states: self.states.clone(), inputs: self.inputs.clone() }
    }

    /// Whether any collision row carries a multiplier above `tol`.
    pub fn collision_active(&self, tol: f64) -> bool {
        self.rows
            .iter()
            .any(|r| r.kind.is_collision() && !r.fixed && r.mu > tol)
    }

    pub fn backoffs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.backoff).collect()
    }
}

fn tracking_objective(traj: &Trajectory, window: &Trajectory, spec: &OcpSpec) -> f64 {
    let n = traj.horizon();
    let mut j = 0.0;
    for k in 0..n {
        j += crate::ocp::stage_cost(
            &traj.states[k],
            &traj.inputs[k],
            &window.states[k],
            &window.inputs[k],
            &spec.weights,
        );
    }
    j + crate::ocp::terminal_cost(&traj.states[n], &window.states[n], &spec.weights)
}

/// KKT residuals of the fixed-backoff problem at `(traj, lambda, mu)`, with
/// all derivatives recomputed at `traj`. Fixed rows are excluded from the
/// feasibility residual: they constrain the given initial state, not the
/// optimizer.
fn nlp_kkt_residuals(
    traj: &Trajectory,
    window: &Trajectory,
    tube: &TubeState,
    lambda: &[Vector5<f64>],
    mu: &[f64],
    slack: &[f64],
    ctx: &SolverContext,
) -> KktResiduals {
    let n = traj.horizon();
    let layout = row_layout(ctx.blocks, n);
    let (jacs, residuals) = stage_jacobians(traj, ctx.disc);
    let w = &ctx.spec.weights;

    let mut lin_rows: Vec<RowLin> = Vec::with_capacity(layout.len());
    for entry in &layout {
        let template = row_template(ctx.blocks, entry);
        lin_rows.push(linearize_row(entry, template, traj, ctx.spec));
    }

    let mut stat: f64 = 0.0;
    for k in 1..=n {
        let qmat = if k == n { w.q_e } else { w.q };
        let mut r = qmat * state_error(&traj.states[k], &window.states[k]) * 2.0 - lambda[k];
        if k < n {
            r += jacs[k].0.transpose() * lambda[k + 1];
        }
        for (idx, entry) in layout.iter().enumerate() {
            if entry.stage == k && mu[idx] != 0.0 {
                r += lin_rows[idx].grad_s * mu[idx];
            }
        }
        stat = stat.max(r.amax());
    }
    for k in 0..n {
        let du = traj.inputs[k].to_vector() - window.inputs[k].to_vector();
        let mut r = w.r * du * 2.0 + jacs[k].1.transpose() * lambda[k + 1];
        for (idx, entry) in layout.iter().enumerate() {
            if entry.stage == k && !entry.terminal && mu[idx] != 0.0 {
                r += lin_rows[idx].grad_u * mu[idx];
            }
        }
        stat = stat.max(r.amax());
    }

    let mut feas: f64 = residuals.iter().map(|r| r.amax()).fold(0.0, f64::max);
    let mut comp: f64 = 0.0;
    for (idx, entry) in layout.iter().enumerate() {
        let template = row_template(ctx.blocks, entry);
        if row_is_fixed(entry, template) {
            continue;
        }
        let tightened = lin_rows[idx].value + tube.backoffs[idx] - slack[idx];
        feas = feas.max(tightened);
        comp = comp.max((mu[idx] * tightened).abs());
    }

    KktResiduals { stationarity: stat, feasibility: feas.max(0.0), complementarity: comp }
}

fn assemble_solution(
    traj: &Trajectory,
    window: &Trajectory,
    tube: &TubeState,
    step: &QpStep,
    ctx: &SolverContext,
    qp_iterations: usize,
    outer_iterations: usize,
    converged: bool,
    backoff_change: f64,
) -> OcpSolution {
    let n = traj.horizon();
    let layout = row_layout(ctx.blocks, n);
    let mut rows = Vec::with_capacity(layout.len());
    for (idx, entry) in layout.iter().enumerate() {
        let template = row_template(ctx.blocks, entry);
        let lin = linearize_row(entry, template, traj, ctx.spec);
        rows.push(RowRecord {
            stage: entry.stage,
            terminal: entry.terminal,
            kind: template.kind,
            name: template.name.clone(),
            value: lin.value,
            backoff: tube.backoffs[idx],
            mu: step.mu[idx],
            slack: step.slack[idx],
            fixed: row_is_fixed(entry, template),
        });
    }
    let kkt = nlp_kkt_residuals(traj, window, tube, &step.lambda, &step.mu, &step.slack, ctx);
    let max_slack = step.slack.iter().fold(0.0f64, |a, s| a.max(*s));
    OcpSolution {
        states: traj.states.clone(),
        inputs: traj.inputs.clone(),
        lambdas: step.lambda.clone(),
        rows,
        sigmas: tube.sigmas.clone(),
        kkt,
        objective: tracking_objective(traj, window, ctx.spec),
        qp_iterations,
        outer_iterations,
        converged,
        step_norm: step.step_norm,
        backoff_change,
        max_slack,
    }
}

/// Builds and solves one fixed-backoff QP; on hard-row infeasibility retries
/// once with every collision row softened.
fn guarded_qp_step(
    traj: &Trajectory,
    window: &Trajectory,
    tube: &TubeState,
    ctx: &SolverContext,
) -> Result<(QpStep, QProblem)> {
    let problem = build_qp(traj, window, tube, ctx)?;
    match solve_qp_step(&problem, traj) {
        Ok(step) => Ok((step, problem)),
        Err(Error::QpInfeasible(_)) => {
            let problem = build_qp_inner(traj, window, tube, ctx, f64::INFINITY)?;
            let step = solve_qp_step(&problem, traj)?;
            Ok((step, problem))
        }
        Err(e) => Err(e),
    }
}

/// One real-time control sample: alternate backoff refreshes and QP solves
/// per the configured schedule (refresh first), starting from `init` with
/// its initial state pinned to `s0`.
pub fn zoro_step(
    s0: &RobotState,
    init: &Trajectory,
    window: &Trajectory,
    ctx: &SolverContext,
) -> Result<OcpSolution> {
    ctx.settings.validate()?;
    let mut traj = init.clone();
    traj.states[0] = *s0;

    let rounds = ctx
        .settings
        .backoff_updates_per_sample
        .max(ctx.settings.qp_iterations_per_sample);
    let mut tube = TubeState::zero(ctx.blocks, traj.horizon());
    let mut last: Option<QpStep> = None;
    let mut qp_count = 0usize;
    let mut prev_backoffs: Option<Vec<f64>> = None;
    let mut backoff_change = f64::INFINITY;

    for round in 0..rounds {
        if round < ctx.settings.backoff_updates_per_sample {
            let next = update_backoffs(&traj, ctx)?;
            if let Some(prev) = &prev_backoffs {
                backoff_change = next
                    .backoffs
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
            }
            prev_backoffs = Some(next.backoffs.clone());
            tube = next;
        }
        if round < ctx.settings.qp_iterations_per_sample {
            let (step, _) = guarded_qp_step(&traj, window, &tube, ctx)?;
            traj = step.traj.clone();
            qp_count += 1;
            last = Some(step);
        }
    }

    let step = last.expect("schedule always runs at least one QP");
    let converged = step.step_norm <= ctx.settings.tol_stationarity
        && backoff_change <= ctx.settings.tol_feasibility;
    Ok(assemble_solution(
        &traj,
        window,
        &tube,
        &step,
        ctx,
        qp_count,
        1,
        converged,
        backoff_change,
    ))
}

/// Alternates {fixed-backoff SQP to stationarity, backoff refresh} until the
/// refresh stalls. Returns the last iterate flagged `converged: false` when
/// the outer cap is hit.
pub fn zoro_solve_to_convergence(
    s0: &RobotState,
    init: Option<&Trajectory>,
    window: &Trajectory,
    ctx: &SolverContext,
) -> Result<OcpSolution> {
    ctx.settings.validate()?;
    let mut traj = init.cloned().unwrap_or_else(|| window.clone());
    traj.states[0] = *s0;

    let mut tube = update_backoffs(&traj, ctx)?;
    let mut qp_count = 0usize;
    let mut last_step: Option<QpStep> = None;
    let mut backoff_change = f64::INFINITY;

    for outer in 1..=ctx.settings.max_outer_iterations {
        let mut inner_norm = f64::INFINITY;
        for _ in 0..ctx.settings.max_inner_iterations {
            let (step, _) = guarded_qp_step(&traj, window, &tube, ctx)?;
            traj = step.traj.clone();
            inner_norm = step.step_norm;
            qp_count += 1;
            last_step = Some(step);
            if inner_norm <= ctx.settings.tol_stationarity {
                break;
            }
        }
        let next = update_backoffs(&traj, ctx)?;
        backoff_change = next
            .backoffs
            .iter()
            .zip(&tube.backoffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        tube = next;
        if backoff_change <= ctx.settings.tol_feasibility
            && inner_norm <= ctx.settings.tol_stationarity
        {
            // One more step against the refreshed tube so the reported
            // multipliers belong to the final backoffs.
            let (step, _) = guarded_qp_step(&traj, window, &tube, ctx)?;
            traj = step.traj.clone();
            qp_count += 1;
            let sol = assemble_solution(
                &traj,
                window,
                &tube,
                &step,
                ctx,
                qp_count,
                outer,
                true,
                backoff_change,
            );
            return Ok(sol);
        }
    }

    let step = match last_step {
        Some(s) => s,
        None => guarded_qp_step(&traj, window, &tube, ctx)?.0,
    };
    Ok(assemble_solution(
        &traj,
        window,
        &tube,
        &step,
        ctx,
        qp_count,
        ctx.settings.max_outer_iterations,
        false,
        backoff_change,
    ))
}

/// Variable order of the stacked decision vector used by the
/// finite-difference diagnostics: all states, then all inputs.
pub fn stack_trajectory(traj: &Trajectory) -> DVector<f64> {
    let n = traj.horizon();
    let mut z = DVector::zeros(N_STATES * (n + 1) + N_INPUTS * n);
    for k in 0..=n {
        z.rows_mut(N_STATES * k, N_STATES)
            .copy_from(&DVector::from_row_slice(traj.states[k].to_vector().as_slice()));
    }
    for k in 0..n {
        let base = N_STATES * (n + 1) + N_INPUTS * k;
        z[base] = traj.inputs[k].a;
        z[base + 1] = traj.inputs[k].alpha;
    }
    z
}

pub fn unstack_trajectory(z: &DVector<f64>, n: usize) -> Trajectory {
    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut v = Vector5::zeros();
        for i in 0..N_STATES {
            v[i] = z[N_STATES * k + i];
        }
        states.push(RobotState::from_vector(&v));
    }
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        let base = N_STATES * (n + 1) + N_INPUTS * k;
        inputs.push(ControlInput::new(z[base], z[base + 1]));
    }
    Trajectory { states, inputs }
}

/// All row backoffs as a function of the stacked trajectory, for
/// finite-difference gradients.
pub fn backoff_vector(traj: &Trajectory, ctx: &SolverContext) -> Result<Vec<f64>> {
    Ok(update_backoffs(traj, ctx)?.backoffs)
}

/// Finite-difference step for backoff gradients.
pub const BACKOFF_FD_STEP: f64 = 1e-6;

/// The Lagrangian-gradient term the fixed-backoff scheme drops: the total
/// derivative of every row's backoff with respect to the trajectory,
/// weighted by that row's multiplier. Computed by central differences
/// through Jacobian recomputation and tube propagation. Components in the
/// pinned initial state are zeroed: its equality multiplier absorbs them.
pub fn disregarded_gradient(
    sol: &OcpSolution,
    ctx: &SolverContext,
) -> Result<(DVector<f64>, f64)> {
    let traj = sol.trajectory();
    let n = traj.horizon();
    let dim = N_STATES * (n + 1) + N_INPUTS * n;

    if matches!(ctx.mode, TubeMode::Zero) {
        return Ok((DVector::zeros(dim), 0.0));
    }

    let mu: Vec<f64> = sol.rows.iter().map(|r| r.mu).collect();
    if mu.iter().all(|m| *m == 0.0) {
        return Ok((DVector::zeros(dim), 0.0));
    }

    let z0 = stack_trajectory(&traj);
    let mut grad = DVector::zeros(dim);
    for j in N_STATES..dim {
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[j] += BACKOFF_FD_STEP;
        zm[j] -= BACKOFF_FD_STEP;
        let bp = backoff_vector(&unstack_trajectory(&zp, n), ctx)?;
        let bm = backoff_vector(&unstack_trajectory(&zm, n), ctx)?;
        let mut acc = 0.0;
        for (i, m) in mu.iter().enumerate() {
            if *m != 0.0 {
                acc += m * (bp[i] - bm[i]) / (2.0 * BACKOFF_FD_STEP);
            }
        }
        grad[j] = acc;
    }
    let norm = grad.amax();
    Ok((grad, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiffDriveParams;
    use crate::ocp::{constraint_blocks, Bounds, Obstacle, Weights};
    use crate::tube::feedback_gain;
    use approx::assert_abs_diff_eq;

    fn disc() -> DiscretizationParams {
        DiscretizationParams { dt: 0.05, substeps: 1 }
    }

    fn base_spec(obstacles: Vec<Obstacle>) -> OcpSpec {
        OcpSpec {
            n: 8,
            weights: Weights::from_diagonals([5.0, 5.0, 1.0, 1.0, 1.0], [0.5, 0.5], [5.0, 5.0, 1.0, 1.0, 1.0])
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

    fn line_window(n: usize, v: f64) -> Trajectory {
        let dt = 0.05;
        let states = (0..=n)
            .map(|k| RobotState::new(v * dt * k as f64, 0.0, 0.0, v, 0.0))
            .collect();
        Trajectory { states, inputs: vec![ControlInput::zeros(); n] }
    }

    struct Ctx {
        spec: OcpSpec,
        blocks: ConstraintBlocks,
        disc: DiscretizationParams,
        gain: FeedbackGain,
        noise: NoiseModel,
        sigma0: ShapeMatrix,
        mode: TubeMode,
        settings: ZoroSettings,
    }

    impl Ctx {
        fn new(spec: OcpSpec, noise: NoiseModel, mode: TubeMode) -> Self {
            let disc = disc();
            let blocks = constraint_blocks(&spec);
            let gain = feedback_gain(&disc, &DiffDriveParams { tau: 0.3 }).unwrap();
            Self {
                spec,
                blocks,
                disc,
                gain,
                noise,
                sigma0: ShapeMatrix::zeros(),
                mode,
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

    fn zero_noise() -> NoiseModel {
        NoiseModel::from_std_devs([0.0; 5]).unwrap()
    }

    fn small_noise() -> NoiseModel {
        NoiseModel::from_std_devs([0.005, 0.005, 0.002, 0.02, 0.02]).unwrap()
    }

    #[test]
    fn on_reference_residuals_vanish() {
        let c = Ctx::new(base_spec(vec![]), zero_noise(), TubeMode::Zero);
        let window = line_window(8, 0.6);
        let tube = TubeState::zero(&c.blocks, 8);
        let problem = build_qp(&window, &window, &tube, &c.ctx()).unwrap();
        for r in &problem.residuals {
            assert!(r.amax() < 1e-12, "dynamics residual {}", r.amax());
        }
        // Condensing offsets vanish with the residuals.
        for t in &problem.cond.t {
            assert!(t.amax() < 1e-11);
        }
    }

    #[test]
    fn on_reference_step_returns_reference_input() {
        let c = Ctx::new(base_spec(vec![]), zero_noise(), TubeMode::Zero);
        let window = line_window(8, 0.6);
        let s0 = window.states[0];
        let sol = zoro_step(&s0, &window, &window, &c.ctx()).unwrap();
        let u0 = sol.first_input();
        assert_abs_diff_eq!(u0.a, window.inputs[0].a, epsilon = 1e-8);
        assert_abs_diff_eq!(u0.alpha, window.inputs[0].alpha, epsilon = 1e-8);
        assert!(sol.kkt.stationarity < 1e-8);
        assert!(sol.kkt.feasibility < 1e-10);
    }

    #[test]
    fn zero_noise_ellipsoidal_equals_nominal_bitwise() {
        let spec = base_spec(vec![Obstacle { cx: 0.6, cy: 0.3, radius: 0.2 }]);
        let ce = Ctx::new(spec.clone(), zero_noise(), TubeMode::Ellipsoidal);
        let cz = Ctx::new(spec, zero_noise(), TubeMode::Zero);
        let window = line_window(8, 0.6);
        let s0 = RobotState::new(0.02, -0.03, 0.01, 0.55, 0.0);
        let a = zoro_step(&s0, &window, &window, &ce.ctx()).unwrap();
        let b = zoro_step(&s0, &window, &window, &cz.ctx()).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.inputs, b.inputs);
        // Ellipsoidal with W = 0, Sigma0 = 0 produces exactly zero backoffs.
        assert!(a.rows.iter().all(|r| r.backoff == 0.0));
    }

    #[test]
    fn update_backoffs_affine_rows_match_lin_tube() {
        let c = Ctx::new(base_spec(vec![]), small_noise(), TubeMode::Ellipsoidal);
        let window = line_window(8, 0.6);
        let tube = update_backoffs(&window, &c.ctx()).unwrap();
        let layout = row_layout(&c.blocks, 8);
        for (idx, entry) in layout.iter().enumerate() {
            let t = row_template(&c.blocks, entry);
            match t.name.as_str() {
                "v_max" | "v_min" => {
                    let expect = tube.sigmas[entry.stage].lin_block()[(0, 0)].sqrt();
                    assert_abs_diff_eq!(tube.backoffs[idx], expect, epsilon = 1e-13);
                }
                "omega_max" | "omega_min" => {
                    let expect = tube.sigmas[entry.stage].lin_block()[(1, 1)].sqrt();
                    assert_abs_diff_eq!(tube.backoffs[idx], expect, epsilon = 1e-13);
                }
                "a_max" | "a_min" | "alpha_max" | "alpha_min" => {
                    assert_eq!(tube.backoffs[idx], 0.0);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn affine_backoffs_trajectory_independent_bitwise() {
        let c = Ctx::new(base_spec(vec![]), small_noise(), TubeMode::Ellipsoidal);
        let w1 = line_window(8, 0.6);
        let mut w2 = line_window(8, 0.2);
        for (i, s) in w2.states.iter_mut().enumerate() {
            s.theta = 0.3 * i as f64;
            s.y = 0.1 * i as f64;
        }
        let t1 = update_backoffs(&w1, &c.ctx()).unwrap();
        let t2 = update_backoffs(&w2, &c.ctx()).unwrap();
        let layout = row_layout(&c.blocks, 8);
        for (idx, entry) in layout.iter().enumerate() {
            if !row_template(&c.blocks, entry).kind.is_collision() {
                assert_eq!(t1.backoffs[idx], t2.backoffs[idx], "row {idx}");
            }
        }
    }

    #[test]
    fn collision_backoff_grows_along_horizon() {
        let spec = base_spec(vec![Obstacle { cx: 0.3, cy: 2.0, radius: 0.3 }]);
        let c = Ctx::new(spec, small_noise(), TubeMode::Ellipsoidal);
        let window = line_window(8, 0.6);
        let tube = update_backoffs(&window, &c.ctx()).unwrap();
        let layout = row_layout(&c.blocks, 8);
        let mut collision_betas = vec![];
        for (idx, entry) in layout.iter().enumerate() {
            if row_template(&c.blocks, entry).kind.is_collision() && !entry.terminal {
                collision_betas.push((entry.stage, tube.backoffs[idx]));
            }
        }
        collision_betas.sort_by_key(|(k, _)| *k);
        for pair in collision_betas.windows(2) {
            assert!(pair[1].1 >= pair[0].1, "backoff not monotone: {pair:?}");
        }
        assert!(collision_betas.last().unwrap().1 > collision_betas[1].1);
    }

    #[test]
    fn convergence_zero_noise_single_outer() {
        let c = Ctx::new(base_spec(vec![]), zero_noise(), TubeMode::Ellipsoidal);
        let window = line_window(8, 0.6);
        let s0 = RobotState::new(0.05, 0.05, 0.0, 0.5, 0.0);
        let sol = zoro_solve_to_convergence(&s0, None, &window, &c.ctx()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.outer_iterations, 1);
        assert!(sol.kkt.stationarity < 1e-7, "stationarity {}", sol.kkt.stationarity);
    }

    #[test]
    fn disregarded_gradient_zero_without_multipliers() {
        let c = Ctx::new(base_spec(vec![]), small_noise(), TubeMode::Ellipsoidal);
        let window = line_window(8, 0.3);
        let s0 = window.states[0];
        let sol = zoro_solve_to_convergence(&s0, None, &window, &c.ctx()).unwrap();
        assert!(sol.converged);
        // Interior solution: no active rows.
        assert!(sol.rows.iter().all(|r| r.mu == 0.0));
        let (vec, norm) = disregarded_gradient(&sol, &c.ctx()).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(vec.amax(), 0.0);
    }

    #[test]
    fn disregarded_gradient_zero_with_affine_rows_active() {
        // Reference velocity above the tightened bound keeps v_max rows
        // active; their backoffs are trajectory-independent, so the dropped
        // term still vanishes.
        let mut spec = base_spec(vec![]);
        spec.n = 8;
        let c = Ctx::new(spec, small_noise(), TubeMode::Ellipsoidal);
        let mut window = line_window(8, 0.999);
        for k in 0..8 {
            window.inputs[k] = ControlInput::zeros();
        }
        let s0 = window.states[0];
        let sol = zoro_solve_to_convergence(&s0, None, &window, &c.ctx()).unwrap();
        assert!(sol.converged);
        assert!(
            sol.rows.iter().any(|r| r.name == "v_max" && r.mu > 1e-6),
            "expected active v_max rows"
        );
        let (_, norm) = disregarded_gradient(&sol, &c.ctx()).unwrap();
        assert!(norm <= 1e-8, "disregarded norm {norm}");
    }

    #[test]
    fn disregarded_gradient_nonzero_with_collision_active() {
        let mut spec = base_spec(vec![Obstacle { cx: 0.5, cy: 0.1, radius: 0.05 }]);
        spec.n = 20;
        let c = Ctx::new(spec, small_noise(), TubeMode::Ellipsoidal);
        let window = line_window(20, 0.9);
        let s0 = window.states[0];
        let sol = zoro_solve_to_convergence(&s0, None, &window, &c.ctx()).unwrap();
        assert!(sol.converged, "must converge to probe the fixed point");
        assert!(sol.collision_active(1e-6), "collision row must be active");
        let (_, norm) = disregarded_gradient(&sol, &c.ctx()).unwrap();
        assert!(norm > 1e-6, "expected nonzero disregarded term, got {norm}");
    }

    #[test]
    fn obstacle_forces_deviation_and_feasible_prediction() {
        let mut spec = base_spec(vec![Obstacle { cx: 0.5, cy: 0.1, radius: 0.05 }]);
        spec.n = 20;
        let c = Ctx::new(spec, small_noise(), TubeMode::Ellipsoidal);
        let window = line_window(20, 0.9);
        let s0 = window.states[0];
        let sol = zoro_solve_to_convergence(&s0, None, &window, &c.ctx()).unwrap();
        let u0 = sol.first_input();
        assert!(
            u0.a.abs() > 1e-4 || u0.alpha.abs() > 1e-4,
            "expected deviation from reference input"
        );
        for r in &sol.rows {
            if !r.fixed {
                assert!(
                    r.value + r.backoff <= 1e-8 + r.slack,
                    "row {} stage {} violated: {} + {}",
                    r.name,
                    r.stage,
                    r.value,
                    r.backoff
                );
            }
        }
        assert!(sol.max_slack <= 1e-10, "slacks should stay inactive");
    }

    #[test]
    fn monolithic_kkt_matches_condensed_solution() {
        // Reference demands v above the tightened bound so box rows
        // activate, plus an obstacle close enough to soften and activate a
        // collision row. The comparison anchors at the converged iterate,
        // where multipliers carry their NLP meaning.
        let mut spec = base_spec(vec![Obstacle { cx: 0.5, cy: 0.1, radius: 0.05 }]);
        spec.n = 20;
        let c = Ctx::new(spec, small_noise(), TubeMode::Ellipsoidal);
        let n = 20;
        let window = line_window(n, 0.98);
        let s0 = RobotState::new(0.0, -0.01, 0.02, 0.9, 0.0);
        let ctx = c.ctx();
        let converged = zoro_solve_to_convergence(&s0, None, &window, &ctx).unwrap();
        assert!(converged.converged);
        let traj = converged.trajectory();
        let tube = update_backoffs(&traj, &ctx).unwrap();
        let problem = build_qp(&traj, &window, &tube, &ctx).unwrap();
        let step = solve_qp_step(&problem, &traj).unwrap();

        // Monolithic KKT: variables [ds; du; slacks], equalities from the
        // pinned initial state and the linearized dynamics, the solved QP's
        // active rows as equalities.
        let ns = N_STATES * (n + 1);
        let nu = problem.nu;
        let nsl = problem.n_slack;
        let nv = ns + nu + nsl;
        let sol = problem.qp.solve().unwrap();

        let mut h = DMatrix::<f64>::zeros(nv, nv);
        for k in 0..=n {
            for i in 0..N_STATES {
                for j in 0..N_STATES {
                    h[(N_STATES * k + i, N_STATES * k + j)] = problem.hs[k][(i, j)];
                }
            }
        }
        for k in 0..n {
            for i in 0..N_INPUTS {
                for j in 0..N_INPUTS {
                    h[(ns + N_INPUTS * k + i, ns + N_INPUTS * k + j)] = problem.hr[k][(i, j)];
                }
                h[(ns + N_INPUTS * k + i, ns + N_INPUTS * k + i)] += c.settings.levenberg;
            }
        }
        for ell in 0..nsl {
            h[(ns + nu + ell, ns + nu + ell)] =
                2.0 * c.settings.slack_penalty_l2 + c.settings.levenberg;
        }
        let mut g = DVector::<f64>::zeros(nv);
        for k in 0..=n {
            for i in 0..N_STATES {
                g[N_STATES * k + i] = problem.gs[k][i];
            }
        }
        for k in 0..n {
            for i in 0..N_INPUTS {
                g[ns + N_INPUTS * k + i] = problem.gu[k][i];
            }
        }
        for ell in 0..nsl {
            g[ns + nu + ell] = c.settings.slack_penalty_l1;
        }

        let mut eq_rows: Vec<DVector<f64>> = vec![];
        let mut eq_rhs: Vec<f64> = vec![];
        for i in 0..N_STATES {
            let mut r = DVector::zeros(nv);
            r[i] = 1.0;
            eq_rows.push(r);
            eq_rhs.push(0.0);
        }
        for k in 0..n {
            let (a, b) = &problem.jacs[k];
            for i in 0..N_STATES {
                let mut r = DVector::zeros(nv);
                for j in 0..N_STATES {
                    r[N_STATES * k + j] = a[(i, j)];
                    if j == i {
                        r[N_STATES * (k + 1) + j] = -1.0;
                    }
                }
                for j in 0..N_INPUTS {
                    r[ns + N_INPUTS * k + j] = b[(i, j)];
                }
                eq_rows.push(r);
                eq_rhs.push(-problem.residuals[k][i]);
            }
        }
        // Active inequality rows as equalities.
        let mut act_meta: Vec<usize> = vec![];
        for &qp_idx in &sol.active {
            match problem.qp_rows[qp_idx] {
                QpRowId::Constraint(meta_idx) => {
                    let m = &problem.meta[meta_idx];
                    let k = m.entry.stage;
                    let mut r = DVector::zeros(nv);
                    for i in 0..N_STATES {
                        r[N_STATES * k + i] = m.grad_s[i];
                    }
                    if !m.entry.terminal {
                        for i in 0..N_INPUTS {
                            r[ns + N_INPUTS * k + i] = m.grad_u[i];
                        }
                    }
                    if let Some(ell) = m.slack_var {
                        r[ns + nu + ell] = -1.0;
                    }
                    eq_rows.push(r);
                    eq_rhs.push(-m.value - m.backoff);
                    act_meta.push(meta_idx);
                }
                QpRowId::SlackNonneg(ell) => {
                    let mut r = DVector::zeros(nv);
                    r[ns + nu + ell] = -1.0;
                    eq_rows.push(r);
                    eq_rhs.push(0.0);
                    act_meta.push(usize::MAX);
                }
            }
        }

        let ne = eq_rows.len();
        let mut kkt = DMatrix::<f64>::zeros(nv + ne, nv + ne);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
        for (i, r) in eq_rows.iter().enumerate() {
            for j in 0..nv {
                kkt[(nv + i, j)] = r[j];
                kkt[(j, nv + i)] = r[j];
            }
        }
        let mut rhs = DVector::<f64>::zeros(nv + ne);
        for i in 0..nv {
            rhs[i] = -g[i];
        }
        for i in 0..ne {
            rhs[nv + i] = eq_rhs[i];
        }
        let full = kkt.lu().solve(&rhs).expect("monolithic KKT solvable");

        // Primal agreement.
        for k in 0..=n {
            for i in 0..N_STATES {
                assert_abs_diff_eq!(full[N_STATES * k + i], step.delta_s[k][i], epsilon = 1e-8);
            }
        }
        for j in 0..nu {
            assert_abs_diff_eq!(full[ns + j], step.delta_u[j], epsilon = 1e-8);
        }
        // Inequality multipliers.
        for (pos, &meta_idx) in act_meta.iter().enumerate() {
            if meta_idx != usize::MAX {
                let nu_full = full[nv + N_STATES + N_STATES * n + pos];
                assert_abs_diff_eq!(nu_full, step.mu[meta_idx], epsilon = 1e-8);
            }
        }
        // Dynamics multipliers against the backward recovery.
        for k in 0..n {
            for i in 0..N_STATES {
                let lam = full[nv + N_STATES + N_STATES * k + i];
                assert_abs_diff_eq!(lam, step.lambda[k + 1][i], epsilon = 1e-7);
            }
        }
        // The test only binds if something is active.
        assert!(!sol.active.is_empty(), "expected active rows in this setup");
        assert!(
            act_meta.iter().any(|&i| i != usize::MAX
                && problem.meta[i].kind.is_collision()),
            "expected an active collision row"
        );
    }

    #[test]
    fn warm_start_shift() {
        let t = line_window(4, 0.5);
        let s = t.shifted();
        assert_eq!(s.states[0], t.states[1]);
        assert_eq!(s.states[4], t.states[4]);
        assert_eq!(s.inputs[3], t.inputs[3]);
    }

    #[test]
    fn monotone_tightening_in_noise() {
        let spec = base_spec(vec![Obstacle { cx: 0.3, cy: 1.0, radius: 0.3 }]);
        let w1 = NoiseModel::from_std_devs([0.005, 0.005, 0.002, 0.02, 0.02]).unwrap();
        let w2 = NoiseModel::from_std_devs([0.01, 0.01, 0.004, 0.04, 0.04]).unwrap();
        let c1 = Ctx::new(spec.clone(), w1, TubeMode::Ellipsoidal);
        let c2 = Ctx::new(spec, w2, TubeMode::Ellipsoidal);
        let window = line_window(8, 0.6);
        let t1 = update_backoffs(&window, &c1.ctx()).unwrap();
        let t2 = update_backoffs(&window, &c2.ctx()).unwrap();
        for (a, b) in t1.backoffs.iter().zip(&t2.backoffs) {
            assert!(b >= a, "tightening not monotone: {b} < {a}");
        }
    }
}
