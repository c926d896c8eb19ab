//! Experiment orchestration behind the command-line front end: runs the
//! configured scenario, writes logs/summaries, and keeps every output
//! reproducible from the echoed config.
//!
//! File conventions: per-run CSV logs (`log_<controller>_<seed>.csv`, 17
//! significant digits so floats round-trip exactly), `summary.json` with the
//! metric digests, and `resolved_config.json` echoing the fully-resolved
//! scenario.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ocp::reference_window;
use crate::oracle::{solve_exact_robust, solve_nominal};
use crate::scenario::{assemble, Assembled, ControllerKind, ScenarioConfig};
use crate::sim::{
    compute_metrics, run_closed_loop, run_monte_carlo, MetricsSummary, Quartiles, SimLog,
    SimOptions,
};
use crate::solver::{
    disregarded_gradient, zoro_solve_to_convergence, zoro_step, OcpSolution, SolverContext,
    Trajectory, TubeMode,
};

/// Trailing-window length defining "steady" for the bound-entry metric.
pub const STEADY_WINDOW: usize = 50;

/// Acceptance tolerances reported by `verify-theorem1`.
pub const THEOREM1_U0_TOL: f64 = 1e-6;
pub const THEOREM1_GRADIENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate { runs: usize },
    Solve,
    Compare,
    VerifyTheorem1,
    EstimateNoise,
    Bench { samples: usize },
}

/// 17 significant digits: enough to reconstruct the exact bit pattern.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

const CSV_HEADER: &str = "step,t,x,y,theta,v,omega,a_cmd,alpha_cmd,w_x,w_y,w_theta,w_v,w_omega,err_pos,err_theta,clearance_min,collision_active,solve_ms";

/// Writes one closed-loop log in the fixed column order.
pub fn write_log_csv(path: &Path, log: &SimLog) -> Result<()> {
    let mut text = String::with_capacity(log.steps.len() * 256);
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in &log.steps {
        let fields = [
            fmt_f64(r.time),
            fmt_f64(r.state.x),
            fmt_f64(r.state.y),
            fmt_f64(r.state.theta),
            fmt_f64(r.state.v),
            fmt_f64(r.state.omega),
            fmt_f64(r.input.a),
            fmt_f64(r.input.alpha),
            fmt_f64(r.noise[0]),
            fmt_f64(r.noise[1]),
            fmt_f64(r.noise[2]),
            fmt_f64(r.noise[3]),
            fmt_f64(r.noise[4]),
            fmt_f64(r.err_pos),
            fmt_f64(r.err_theta),
            fmt_f64(r.clearance_min()),
            (r.collision_active as u8).to_string(),
            fmt_f64(r.solve_time * 1e3),
        ];
        let _ = write!(text, "{}", r.step);
        for f in fields {
            text.push(',');
            text.push_str(&f);
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializes"))?;
    Ok(())
}

fn echo_config(cfg: &ScenarioConfig, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("resolved_config.json");
    std::fs::write(&path, cfg.resolved_json())?;
    Ok(path)
}

#[derive(Debug, Serialize)]
struct RunSummary {
    controller: &'static str,
    seed: u64,
    stream: u64,
    noise_mode: &'static str,
    held_steps: usize,
    metrics: MetricsSummary,
}

fn summarize(log: &SimLog, opts: &SimOptions, stream: u64) -> Result<RunSummary> {
    Ok(RunSummary {
        controller: log.controller,
        seed: opts.seed,
        stream,
        noise_mode: log.noise_mode,
        held_steps: log.held_count,
        metrics: compute_metrics(log, STEADY_WINDOW)?,
    })
}

fn simulate(cfg: &ScenarioConfig, runs: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let asm = assemble(cfg)?;
    let ctx = asm.ctx();
    let mut files = vec![echo_config(cfg, out_dir)?];
    let label = asm.options.controller.label();
    let mut summaries = Vec::with_capacity(runs);
    if runs <= 1 {
        let log = run_closed_loop(&asm.reference, &asm.plant, &ctx, &asm.options)?;
        let path = out_dir.join(format!("log_{label}_{}.csv", cfg.seed));
        write_log_csv(&path, &log)?;
        summaries.push(summarize(&log, &asm.options, 0)?);
        files.push(path);
    } else {
        let logs = run_monte_carlo(&asm.reference, &asm.plant, &ctx, &asm.options, runs)?;
        for (i, log) in logs.iter().enumerate() {
            let path = out_dir.join(format!("log_{label}_{}_run{i}.csv", cfg.seed));
            write_log_csv(&path, log)?;
            summaries.push(summarize(log, &asm.options, i as u64)?);
            files.push(path);
        }
    }
    let min_clearance = summaries
        .iter()
        .map(|s| s.metrics.min_clearance)
        .fold(f64::INFINITY, f64::min);
    let violations = summaries
        .iter()
        .filter(|s| s.metrics.min_clearance < 0.0)
        .count();
    #[derive(Serialize)]
    struct SimulateSummary {
        command: &'static str,
        runs: usize,
        batch_min_clearance: f64,
        runs_with_violation: usize,
        per_run: Vec<RunSummary>,
    }
    let summary = SimulateSummary {
        command: "simulate",
        runs,
        batch_min_clearance: min_clearance,
        runs_with_violation: violations,
        per_run: summaries,
    };
    let path = out_dir.join("summary.json");
    write_json(&path, &summary)?;
    files.push(path);
    println!(
        "simulate: {label} x{runs} done; min clearance {min_clearance:.4} m, {violations} run(s) with violation"
    );
    Ok(files)
}

/// Solves the stage-0 OCP to convergence with the configured controller.
fn solve_once(asm: &Assembled) -> Result<OcpSolution> {
    let (win_states, win_inputs) = reference_window(&asm.reference, 0, asm.spec.n);
    let window = Trajectory::new(win_states, win_inputs)?;
    let s0 = asm.options.start;
    let ctx = asm.ctx();
    let sol = match asm.options.controller {
        crate::sim::Controller::Exact => solve_exact_robust(&s0, None, &window, &ctx)?,
        crate::sim::Controller::Nominal => solve_nominal(&s0, None, &window, &ctx)?,
        crate::sim::Controller::ScalarTube(st) => {
            let mode = TubeMode::Scalar(st);
            let sctx = SolverContext { mode: &mode, ..ctx };
            zoro_solve_to_convergence(&s0, None, &window, &sctx)?
        }
        crate::sim::Controller::Zoro => zoro_solve_to_convergence(&s0, None, &window, &ctx)?,
    };
    if !sol.converged {
        return Err(Error::NoConvergence {
            iterations: sol.outer_iterations,
            step_norm: sol.step_norm,
            backoff_change: sol.backoff_change,
        });
    }
    Ok(sol)
}

#[derive(Debug, Serialize)]
struct SolutionReport {
    controller: &'static str,
    converged: bool,
    objective: f64,
    qp_iterations: usize,
    outer_iterations: usize,
    kkt_stationarity: f64,
    kkt_feasibility: f64,
    kkt_complementarity: f64,
    max_slack: f64,
    collision_active: bool,
    first_input: [f64; 2],
    states: Vec<[f64; 5]>,
    inputs: Vec<[f64; 2]>,
    backoffs: Vec<f64>,
}

fn solution_report(label: &'static str, sol: &OcpSolution) -> SolutionReport {
    SolutionReport {
        controller: label,
        converged: sol.converged,
        objective: sol.objective,
        qp_iterations: sol.qp_iterations,
        outer_iterations: sol.outer_iterations,
        kkt_stationarity: sol.kkt.stationarity,
        kkt_feasibility: sol.kkt.feasibility,
        kkt_complementarity: sol.kkt.complementarity,
        max_slack: sol.max_slack,
        collision_active: sol.collision_active(crate::sim::ACTIVE_MU_TOL),
        first_input: [sol.inputs[0].a, sol.inputs[0].alpha],
        states: sol.states.iter().map(|s| [s.x, s.y, s.theta, s.v, s.omega]).collect(),
        inputs: sol.inputs.iter().map(|u| [u.a, u.alpha]).collect(),
        backoffs: sol.backoffs(),
    }
}

fn solve(cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let asm = assemble(cfg)?;
    let sol = solve_once(&asm)?;
    let report = solution_report(asm.options.controller.label(), &sol);
    let path = out_dir.join("solution.json");
    write_json(&path, &report)?;
    println!(
        "solve: {} converged in {} QP iterations, objective {:.6e}, stationarity {:.3e}",
        report.controller, report.qp_iterations, report.objective, report.kkt_stationarity
    );
    Ok(vec![echo_config(cfg, out_dir)?, path])
}

fn compare(cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![echo_config(cfg, out_dir)?];
    let kinds = [
        ControllerKind::Zoro,
        ControllerKind::Nominal,
        ControllerKind::Exact,
        ControllerKind::ScalarTube,
    ];
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut run_cfg = cfg.clone();
        run_cfg.controller.kind = kind;
        let asm = assemble(&run_cfg)?;
        let ctx = asm.ctx();
        let log = run_closed_loop(&asm.reference, &asm.plant, &ctx, &asm.options)?;
        let label = asm.options.controller.label();
        let path = out_dir.join(format!("log_{label}_{}.csv", cfg.seed));
        write_log_csv(&path, &log)?;
        files.push(path);
        let row = summarize(&log, &asm.options, 0)?;
        println!(
            "compare: {label:<11} err_pos max {:.4} final {:.4}; min clearance {:.4}; held {}",
            row.metrics.err_pos_max,
            row.metrics.err_pos_final,
            row.metrics.min_clearance,
            row.held_steps
        );
        rows.push(row);
    }
    #[derive(Serialize)]
    struct CompareSummary {
        command: &'static str,
        per_controller: Vec<RunSummary>,
    }
    let path = out_dir.join("summary.json");
    write_json(&path, &CompareSummary { command: "compare", per_controller: rows })?;
    files.push(path);
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct Theorem1Report {
    pub u0_deviation_inf: f64,
    pub disregarded_gradient_inf: f64,
    pub u0_tolerance: f64,
    pub gradient_tolerance: f64,
    pub zoro_converged: bool,
    pub exact_converged: bool,
    pub collision_rows_active: bool,
    pub pass: bool,
}

/// Converged frozen-backoff solution vs the exact-robust oracle on the same
/// problem, plus the norm of the gradient term the scheme disregards.
///
/// Both solvers start from the reference window, not from each other, so the
/// comparison measures two independently found optima.
pub fn verify_theorem1(asm: &Assembled) -> Result<Theorem1Report> {
    let (win_states, win_inputs) = reference_window(&asm.reference, 0, asm.spec.n);
    let window = Trajectory::new(win_states, win_inputs)?;
    let s0 = asm.options.start;
    let ctx = asm.ctx();
    let zoro = zoro_solve_to_convergence(&s0, None, &window, &ctx)?;
    let exact = solve_exact_robust(&s0, None, &window, &ctx)?;
    let du = (zoro.first_input().to_vector() - exact.first_input().to_vector()).amax();
    let (_, grad_norm) = disregarded_gradient(&zoro, &ctx)?;
    let report = Theorem1Report {
        u0_deviation_inf: du,
        disregarded_gradient_inf: grad_norm,
        u0_tolerance: THEOREM1_U0_TOL,
        gradient_tolerance: THEOREM1_GRADIENT_TOL,
        zoro_converged: zoro.converged,
        exact_converged: exact.converged,
        collision_rows_active: zoro.collision_active(crate::sim::ACTIVE_MU_TOL)
            || exact.collision_active(crate::sim::ACTIVE_MU_TOL),
        pass: du <= THEOREM1_U0_TOL
            && grad_norm <= THEOREM1_GRADIENT_TOL
            && zoro.converged
            && exact.converged,
    };
    Ok(report)
}

fn verify_theorem1_cmd(cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let asm = assemble(cfg)?;
    let report = verify_theorem1(&asm)?;
    if !report.zoro_converged || !report.exact_converged {
        return Err(Error::NoConvergence {
            iterations: 0,
            step_norm: f64::NAN,
            backoff_change: f64::NAN,
        });
    }
    println!(
        "verify-theorem1: |u0_zoro - u0_exact|_inf = {:.3e} (tol {:.0e})",
        report.u0_deviation_inf, report.u0_tolerance
    );
    println!(
        "verify-theorem1: |disregarded gradient|_inf = {:.3e} (tol {:.0e})",
        report.disregarded_gradient_inf, report.gradient_tolerance
    );
    println!("verify-theorem1: {}", if report.pass { "PASS" } else { "FAIL" });
    let path = out_dir.join("theorem1.json");
    write_json(&path, &report)?;
    Ok(vec![echo_config(cfg, out_dir)?, path])
}

fn estimate_noise(cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let asm = assemble(cfg)?;
    let ctx = asm.ctx();
    let log = run_closed_loop(&asm.reference, &asm.plant, &ctx, &asm.options)?;
    let mut states: Vec<_> = log.steps.iter().map(|r| r.state).collect();
    states.push(log.final_state);
    let inputs: Vec<_> = log.steps.iter().map(|r| r.input).collect();
    let est = crate::scenario::estimate_noise_bounds(&states, &inputs, &asm.disc)?;
    println!(
        "estimate-noise: {} samples; sigma = [{:.3e}, {:.3e}, {:.3e}, {:.3e}, {:.3e}]",
        est.samples, est.sigma[0], est.sigma[1], est.sigma[2], est.sigma[3], est.sigma[4]
    );
    println!(
        "estimate-noise: W diag (3-sigma squared) = [{:.3e}, {:.3e}, {:.3e}, {:.3e}, {:.3e}]",
        est.w_diag[0], est.w_diag[1], est.w_diag[2], est.w_diag[3], est.w_diag[4]
    );
    let path = out_dir.join("noise_estimate.json");
    write_json(&path, &est)?;
    Ok(vec![echo_config(cfg, out_dir)?, path])
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub samples: usize,
    /// Per-sample wall time of the frozen-backoff step [ms].
    pub zoro_step_ms: Quartiles,
    /// Wall time of the exact-robust solve on the same subproblems [ms].
    pub exact_solve_ms: Quartiles,
    pub median_speedup: f64,
}

/// Times both solvers on the same subproblem sequence: the closed loop is
/// driven by the frozen-backoff controller, and at every sample the exact
/// solver is also run (warm-started identically) without influencing the
/// loop.
pub fn bench(asm: &Assembled, samples: usize) -> Result<BenchReport> {
    let ctx = asm.ctx();
    let n = asm.spec.n;
    let mut s = asm.options.start;
    let mut warm: Option<Trajectory> = None;
    let mut zoro_ms = Vec::with_capacity(samples);
    let mut exact_ms = Vec::with_capacity(samples);
    let plant = &asm.plant;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(asm.options.seed);
    for k in 0..samples {
        let (win_states, win_inputs) = reference_window(&asm.reference, k, n);
        let window = Trajectory::new(win_states, win_inputs)?;
        let init = warm
            .as_ref()
            .map(Trajectory::shifted)
            .unwrap_or_else(|| window.clone());

        let t0 = Instant::now();
        let step = zoro_step(&s, &init, &window, &ctx)?;
        zoro_ms.push(t0.elapsed().as_secs_f64() * 1e3);

        let t1 = Instant::now();
        let _ = solve_exact_robust(&s, Some(&init), &window, &ctx)?;
        exact_ms.push(t1.elapsed().as_secs_f64() * 1e3);

        let (next, _) = crate::sim::plant_step(&s, &step.first_input(), plant, &asm.disc, &mut rng);
        s = next;
        warm = Some(step.trajectory());
    }
    let z = Quartiles::from_series(&zoro_ms)?;
    let e = Quartiles::from_series(&exact_ms)?;
    Ok(BenchReport {
        samples,
        zoro_step_ms: z,
        exact_solve_ms: e,
        median_speedup: e.median / z.median,
    })
}

fn bench_cmd(cfg: &ScenarioConfig, samples: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let asm = assemble(cfg)?;
    let report = bench(&asm, samples)?;
    let fmt = |q: &Quartiles| {
        format!(
            "min {:.3} | q1 {:.3} | med {:.3} | q3 {:.3} | max {:.3} ms",
            q.min, q.lower, q.median, q.upper, q.max
        )
    };
    println!("bench: zoro_step   {}", fmt(&report.zoro_step_ms));
    println!("bench: exact solve {}", fmt(&report.exact_solve_ms));
    println!("bench: median speedup {:.1}x over {} samples", report.median_speedup, report.samples);
    let path = out_dir.join("bench.json");
    write_json(&path, &report)?;
    Ok(vec![echo_config(cfg, out_dir)?, path])
}

/// Entry point used by the binary: dispatches a subcommand and returns the
/// files it wrote.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    cmd: &Command,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    match cmd {
        Command::Simulate { runs } => simulate(cfg, (*runs).max(1), out_dir),
        Command::Solve => solve(cfg, out_dir),
        Command::Compare => compare(cfg, out_dir),
        Command::VerifyTheorem1 => verify_theorem1_cmd(cfg, out_dir),
        Command::EstimateNoise => estimate_noise(cfg, out_dir),
        Command::Bench { samples } => bench_cmd(cfg, (*samples).max(1), out_dir),
    }
}
