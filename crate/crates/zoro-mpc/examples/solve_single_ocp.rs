//! Solves one robust tracking problem to convergence and dumps the result:
//! first input, cost, KKT residuals, and the per-row backoffs that tighten
//! the collision constraints.

use std::path::Path;

use zoro_mpc::ocp::reference_window;
use zoro_mpc::scenario::{assemble, load_scenario};
use zoro_mpc::solver::{zoro_solve_to_convergence, Trajectory};

fn main() -> zoro_mpc::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let cfg = load_scenario(&root.join("scenarios/single_obstacle.json"))?;
    let asm = assemble(&cfg)?;
    let ctx = asm.ctx();

    // Window 85 puts the obstacle mid-horizon: the reference line passes
    // 0.05 m inside the inflated disc, so the solver has to buy clearance.
    // The reference window doubles as the initial guess.
    let (states, inputs) = reference_window(&asm.reference, 85, asm.spec.n);
    let window = Trajectory::new(states, inputs)?;
    let s0 = window.states[0];

    let sol = zoro_solve_to_convergence(&s0, None, &window, &ctx)?;

    println!("converged: {} after {} QP iterations ({} tube refreshes)",
        sol.converged, sol.qp_iterations, sol.outer_iterations);
    println!("objective: {:.6e}", sol.objective);
    println!("first input: a = {:+.4} m/s^2, alpha = {:+.4} rad/s^2",
        sol.first_input().a, sol.first_input().alpha);
    println!("KKT: stationarity {:.2e}, feasibility {:.2e}, complementarity {:.2e}",
        sol.kkt.stationarity, sol.kkt.feasibility, sol.kkt.complementarity);

    let backoffs = sol.backoffs();
    let max_backoff = backoffs.iter().cloned().fold(0.0f64, f64::max);
    println!("{} tightened rows, largest backoff {:.4} m", backoffs.len(), max_backoff);

    println!("\nstage |      x      |      y      |   v");
    for (k, s) in sol.states.iter().enumerate().step_by(4) {
        println!("{k:5} | {:11.6} | {:11.6} | {:6.3}", s.x, s.y, s.v);
    }
    Ok(())
}
