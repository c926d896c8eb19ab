//! Times the fixed-iteration real-time step against the exact robust solver
//! on the same closed-loop subproblems, then measures what warm-starting a
//! to-convergence solve is worth. The warm-start numbers are informative
//! only — they move with the scenario and the machine.

use std::path::Path;
use std::time::Instant;

use zoro_mpc::model::integrate_step;
use zoro_mpc::ocp::reference_window;
use zoro_mpc::runner::bench;
use zoro_mpc::scenario::{assemble, load_scenario};
use zoro_mpc::solver::{zoro_solve_to_convergence, Trajectory};

fn main() -> zoro_mpc::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let cfg = load_scenario(&root.join("scenarios/obstacle_free.json"))?;
    let asm = assemble(&cfg)?;

    let rep = bench(&asm, 100)?;
    let fmt = |q: &zoro_mpc::sim::Quartiles| {
        format!("min {:7.3} | q1 {:7.3} | median {:7.3} | q3 {:7.3} | max {:7.3}",
            q.min, q.lower, q.median, q.upper, q.max)
    };
    println!("wall time per call [ms], {} samples:", rep.samples);
    println!("  real-time step: {}", fmt(&rep.zoro_step_ms));
    println!("  exact solve:    {}", fmt(&rep.exact_solve_ms));
    println!("  median speedup: {:.1}x", rep.median_speedup);

    // Warm vs cold initialization of the to-convergence solve, on a rollout
    // that keeps the collision rows busy.
    let cfg = load_scenario(&root.join("scenarios/gauntlet.json"))?;
    let asm = assemble(&cfg)?;
    let ctx = asm.ctx();
    let mut s = asm.options.start;
    let mut warm: Option<Trajectory> = None;
    let (mut qp_warm, mut qp_cold) = (0usize, 0usize);
    let (mut ms_warm, mut ms_cold) = (0.0f64, 0.0f64);
    let steps = 80;
    for k in 0..steps {
        let (ws, wi) = reference_window(&asm.reference, k, asm.spec.n);
        let window = Trajectory::new(ws, wi)?;

        let t0 = Instant::now();
        let cold = zoro_solve_to_convergence(&s, None, &window, &ctx)?;
        ms_cold += t0.elapsed().as_secs_f64() * 1e3;
        qp_cold += cold.qp_iterations;

        let init = warm.as_ref().map(Trajectory::shifted);
        let t0 = Instant::now();
        let sol = zoro_solve_to_convergence(&s, init.as_ref(), &window, &ctx)?;
        ms_warm += t0.elapsed().as_secs_f64() * 1e3;
        qp_warm += sol.qp_iterations;

        s = integrate_step(&s, &sol.first_input(), &asm.disc);
        warm = Some(sol.trajectory());
    }
    println!("\nto-convergence solves over {steps} gauntlet steps (measured, scenario-dependent):");
    println!("  cold start (reference window): {qp_cold:4} QP iterations, {ms_cold:7.1} ms total");
    println!("  warm start (shifted previous): {qp_warm:4} QP iterations, {ms_warm:7.1} ms total");
    Ok(())
}
