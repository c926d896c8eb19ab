//! Independent reference solvers used to cross-check the main controller.
//!
//! `solve_exact_robust` attacks the robust problem head-on: states are
//! eliminated by forward rollout, tube shapes by forward propagation, and
//! the SQP sees the *total* derivative of every tightened row through both,
//! obtained by central finite differences. It is deliberately slow and
//! deliberately independent of the condensed fixed-backoff path.
//!
//! `solve_qp_by_enumeration` brute-forces a dense QP by trying active sets
//! in order of cardinality; strict convexity makes the first KKT-consistent
//! subset the unique optimum.

use nalgebra::{DMatrix, DVector, Vector5};

use crate::error::{Error, Result};
use crate::model::{integrate_step, integrate_with_sensitivities, ControlInput, RobotState, N_INPUTS, N_STATES};
use crate::ocp::state_error;
use crate::qp::{dmatrix_from_rows, DenseQp, QpSolution};
use crate::solver::{
    row_layout, row_template, stack_trajectory, unstack_trajectory, update_backoffs,
    KktResiduals, OcpSolution, RowRecord, SolverContext, Trajectory, TubeMode,
};
use crate::tube::ShapeMatrix;

/// The exact solver is dense in every direction; keep horizons short.
pub const MAX_EXACT_HORIZON: usize = 30;

const MAX_SQP_ITERATIONS: usize = 300;
const FD_STEP: f64 = 1e-5;
/// L1 penalty that keeps intermediate SQP subproblems feasible. Exact for
/// multipliers below it, and the final feasibility check is unconditional.
const SLACK_PENALTY: f64 = 1e6;

/// Nominal MPC to convergence: the same machinery with zero tightening.
pub fn solve_nominal(
    s0: &RobotState,
    init: Option<&Trajectory>,
    window: &Trajectory,
    ctx: &SolverContext,
) -> Result<OcpSolution> {
    let mode = TubeMode::Zero;
    let nominal_ctx = SolverContext { mode: &mode, ..*ctx };
    crate::solver::zoro_solve_to_convergence(s0, init, window, &nominal_ctx)
}

fn rollout(s0: &RobotState, inputs: &[ControlInput], ctx: &SolverContext) -> Trajectory {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*s0);
    for (k, u) in inputs.iter().enumerate() {
        states.push(integrate_step(&states[k], u, ctx.disc));
    }
    Trajectory { states, inputs: inputs.to_vec() }
}

/// Row values + backoffs at a trajectory; `phi = value + backoff` is the
/// tightened constraint in reduced form.
struct RowEval {
    values: Vec<f64>,
    backoffs: Vec<f64>,
    sigmas: Vec<ShapeMatrix>,
}

fn eval_rows(traj: &Trajectory, ctx: &SolverContext) -> Result<RowEval> {
    let layout = row_layout(ctx.blocks, traj.horizon());
    let tube = update_backoffs(traj, ctx)?;
    let mut values = Vec::with_capacity(layout.len());
    for entry in &layout {
        let template = row_template(ctx.blocks, entry);
        values.push(crate::solver::row_value(entry, template, traj, ctx.spec));
    }
    Ok(RowEval { values, backoffs: tube.backoffs, sigmas: tube.sigmas })
}

fn phi_at(u: &[ControlInput], s0: &RobotState, ctx: &SolverContext) -> Result<(Trajectory, Vec<f64>, RowEval)> {
    let traj = rollout(s0, u, ctx);
    let eval = eval_rows(&traj, ctx)?;
    let phi = eval
        .values
        .iter()
        .zip(&eval.backoffs)
        .map(|(v, b)| v + b)
        .collect();
    Ok((traj, phi, eval))
}

fn backoffs_at(u: &[ControlInput], s0: &RobotState, ctx: &SolverContext) -> Result<Vec<f64>> {
    let traj = rollout(s0, u, ctx);
    Ok(update_backoffs(&traj, ctx)?.backoffs)
}

/// Backoffs smaller than this are treated as flat for differencing.
const BETA_FD_FLOOR: f64 = 1e-12;

/// Adds the central-difference quotient of the backoff to `acc`, computed
/// on the squared radicand: the square root would amplify evaluation noise
/// exactly where backoffs are small.
fn beta_fd(beta_plus: f64, beta_minus: f64, beta_center: f64) -> f64 {
    if beta_center <= BETA_FD_FLOOR {
        return 0.0;
    }
    (beta_plus * beta_plus - beta_minus * beta_minus) / (4.0 * FD_STEP * beta_center)
}

fn objective(traj: &Trajectory, window: &Trajectory, ctx: &SolverContext) -> f64 {
    let n = traj.horizon();
    let mut j = 0.0;
    for k in 0..n {
        j += crate::ocp::stage_cost(
            &traj.states[k],
            &traj.inputs[k],
            &window.states[k],
            &window.inputs[k],
            &ctx.spec.weights,
        );
    }
    j + crate::ocp::terminal_cost(&traj.states[n], &window.states[n], &ctx.spec.weights)
}

/// Exact rollout sensitivities `ds_k/du`, chained stage by stage.
fn rollout_sensitivities(traj: &Trajectory, ctx: &SolverContext) -> Vec<DMatrix<f64>> {
    let n = traj.horizon();
    let nu = N_INPUTS * n;
    let mut m: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    m.push(DMatrix::zeros(N_STATES, nu));
    for k in 0..n {
        let (_, a, b) = integrate_with_sensitivities(&traj.states[k], &traj.inputs[k], ctx.disc);
        let mut mk = DMatrix::zeros(N_STATES, nu);
        for j in 0..nu {
            let col = Vector5::from_iterator(m[k].column(j).iter().copied());
            mk.column_mut(j).copy_from(&DVector::from_row_slice((a * col).as_slice()));
        }
        for i in 0..N_STATES {
            for j in 0..N_INPUTS {
                mk[(i, N_INPUTS * k + j)] += b[(i, j)];
            }
        }
        m.push(mk);
    }
    m
}

fn violation(phi: &[f64], fixed: &[bool]) -> f64 {
    phi.iter()
        .zip(fixed)
        .filter(|(_, f)| !**f)
        .map(|(p, _)| p.max(0.0))
        .sum()
}

/// Solves the robust tracking problem with total backoff derivatives: an
/// SQP in input space whose constraint Jacobian is obtained by central
/// finite differences through rollout and tube propagation. Converges to
/// stationarity `tol_stationarity` of the reduced problem or reports
/// no-convergence honestly.
pub fn solve_exact_robust(
    s0: &RobotState,
    init: Option<&Trajectory>,
    window: &Trajectory,
    ctx: &SolverContext,
) -> Result<OcpSolution> {
    let n = window.horizon();
    if n > MAX_EXACT_HORIZON {
        return Err(Error::Validation(format!(
            "exact solver horizon {n} exceeds the supported maximum {MAX_EXACT_HORIZON}"
        )));
    }
    ctx.settings.validate()?;
    let nu = N_INPUTS * n;
    let layout = row_layout(ctx.blocks, n);
    let fixed: Vec<bool> = layout
        .iter()
        .map(|e| crate::solver::row_is_fixed(e, row_template(ctx.blocks, e)))
        .collect();
    let soft: Vec<bool> = layout
        .iter()
        .zip(&fixed)
        .map(|(e, f)| !*f && row_template(ctx.blocks, e).kind.is_collision())
        .collect();
    let n_soft = soft.iter().filter(|s| **s).count();

    let mut u: Vec<ControlInput> = match init {
        Some(t) => t.inputs.clone(),
        None => window.inputs.clone(),
    };
    if u.len() != n {
        return Err(Error::Validation(format!(
            "initial guess horizon {} does not match window horizon {n}",
            u.len()
        )));
    }

    let w = &ctx.spec.weights;
    let mut sqp_iters = 0usize;
    let mut converged = false;
    let mut last_mu = vec![0.0; layout.len()];
    let mut last_step_norm = f64::INFINITY;
    let mut stalls = 0usize;
    let mut rho = 10.0f64;

    for _ in 0..MAX_SQP_ITERATIONS {
        sqp_iters += 1;
        let (traj, phi, eval) = phi_at(&u, s0, ctx)?;
        let sens = rollout_sensitivities(&traj, ctx);

        // Exact Gauss-Newton cost model in u.
        let mut h = DMatrix::<f64>::zeros(nu, nu);
        let mut grad_j = DVector::<f64>::zeros(nu);
        for k in 0..=n {
            let qmat = if k == n { w.q_e } else { w.q };
            let e = state_error(&traj.states[k], &window.states[k]);
            let mk = &sens[k];
            if k >= 1 {
                let mut qm = DMatrix::zeros(N_STATES, nu);
                for j in 0..nu {
                    let col = Vector5::from_iterator(mk.column(j).iter().copied());
                    qm.column_mut(j)
                        .copy_from(&DVector::from_row_slice((qmat * col * 2.0).as_slice()));
                }
                h += mk.transpose() * &qm;
                grad_j += mk.transpose() * DVector::from_row_slice((qmat * e * 2.0).as_slice());
            }
        }
        for k in 0..n {
            let du = traj.inputs[k].to_vector() - window.inputs[k].to_vector();
            let gu = w.r * du * 2.0;
            for i in 0..N_INPUTS {
                for jj in 0..N_INPUTS {
                    h[(N_INPUTS * k + i, N_INPUTS * k + jj)] += 2.0 * w.r[(i, jj)];
                }
                grad_j[N_INPUTS * k + i] += gu[i];
            }
        }

        // Total row Jacobian: exact constraint part chained through the
        // rollout sensitivities, plus the backoff's total derivative by
        // central differences through rollout and tube propagation.
        let mut c_rows = DMatrix::<f64>::zeros(layout.len(), nu);
        for (i, entry) in layout.iter().enumerate() {
            if fixed[i] {
                continue;
            }
            let template = row_template(ctx.blocks, entry);
            let (gs, gu) = crate::solver::row_gradients(entry, template, &traj, ctx.spec);
            let mk = &sens[entry.stage];
            for j in 0..nu {
                let col = Vector5::from_iterator(mk.column(j).iter().copied());
                c_rows[(i, j)] = gs.dot(&col);
            }
            if !entry.terminal {
                for comp in 0..N_INPUTS {
                    c_rows[(i, N_INPUTS * entry.stage + comp)] += gu[comp];
                }
            }
        }
        for j in 0..nu {
            let (k, comp) = (j / N_INPUTS, j % N_INPUTS);
            let mut up = u.clone();
            let mut um = u.clone();
            if comp == 0 {
                up[k].a += FD_STEP;
                um[k].a -= FD_STEP;
            } else {
                up[k].alpha += FD_STEP;
                um[k].alpha -= FD_STEP;
            }
            let bp = backoffs_at(&up, s0, ctx)?;
            let bm = backoffs_at(&um, s0, ctx)?;
            for i in 0..layout.len() {
                if !fixed[i] {
                    c_rows[(i, j)] += beta_fd(bp[i], bm[i], eval.backoffs[i]);
                }
            }
        }

        // QP over [du; slacks]: softened collision rows keep the iteration
        // alive when the linearization is locally infeasible.
        let nv = nu + n_soft;
        let mut h_full = DMatrix::<f64>::zeros(nv, nv);
        h_full.view_mut((0, 0), (nu, nu)).copy_from(&h);
        for i in 0..nu {
            h_full[(i, i)] += ctx.settings.levenberg;
        }
        for ell in 0..n_soft {
            h_full[(nu + ell, nu + ell)] = 1.0;
        }
        let mut g_full = DVector::<f64>::zeros(nv);
        g_full.rows_mut(0, nu).copy_from(&grad_j);
        for ell in 0..n_soft {
            g_full[nu + ell] = SLACK_PENALTY;
        }

        let mut rows: Vec<DVector<f64>> = vec![];
        let mut rhs: Vec<f64> = vec![];
        let mut row_to_layout: Vec<usize> = vec![];
        let mut slack_idx = 0usize;
        for (i, f) in fixed.iter().enumerate() {
            if *f {
                continue;
            }
            let mut r = DVector::<f64>::zeros(nv);
            for j in 0..nu {
                r[j] = c_rows[(i, j)];
            }
            if soft[i] {
                r[nu + slack_idx] = -1.0;
                slack_idx += 1;
            }
            rows.push(r);
            rhs.push(-phi[i]);
            row_to_layout.push(i);
        }
        for ell in 0..n_soft {
            let mut r = DVector::<f64>::zeros(nv);
            r[nu + ell] = -1.0;
            rows.push(r);
            rhs.push(0.0);
            row_to_layout.push(usize::MAX);
        }

        let qp = DenseQp::new(
            h_full,
            g_full,
            dmatrix_from_rows(&rows, nv),
            DVector::from_vec(rhs),
        )?;
        let sol = qp.solve()?;

        let mut mu = vec![0.0; layout.len()];
        for (qp_row, &li) in row_to_layout.iter().enumerate() {
            if li != usize::MAX {
                mu[li] = sol.mu[qp_row];
            }
        }

        // True reduced KKT residual at the *current* point with the QP's
        // multipliers; terminates on stationarity, not step size.
        let mut stat_vec = grad_j.clone();
        for (i, m) in mu.iter().enumerate() {
            if *m != 0.0 {
                for j in 0..nu {
                    stat_vec[j] += m * c_rows[(i, j)];
                }
            }
        }
        let stat = stat_vec.amax();
        let feas_now = phi
            .iter()
            .zip(&fixed)
            .filter(|(_, f)| !**f)
            .map(|(p, _)| *p)
            .fold(0.0f64, f64::max);
        let mu_max = mu.iter().fold(0.0f64, |a, m| a.max(*m));
        last_mu = mu;
        if stat <= ctx.settings.tol_stationarity && feas_now <= ctx.settings.tol_feasibility {
            converged = true;
            break;
        }

        let d = sol.x.rows(0, nu).into_owned();
        let step_norm = d.amax();
        if std::env::var_os("ZORO_TRACE").is_some() {
            eprintln!(
                "sqp it {sqp_iters}: stat {stat:.3e} feas {feas_now:.3e} step {step_norm:.3e} rho {rho:.1e} mu_max {mu_max:.3e}",
            );
        }

        // Armijo backtracking on the L1 merit. The penalty tracks the
        // largest multiplier so the QP direction stays a descent direction
        // without drowning the cost term in penalty-amplified noise.
        rho = rho.max(1.5 * mu_max);
        let j0 = objective(&traj, window, ctx);
        let viol0 = violation(&phi, &fixed);
        let m0 = j0 + rho * viol0;
        let descent = grad_j.dot(&d) - rho * viol0;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut u_try = u.clone();
            for k in 0..n {
                u_try[k].a += t * d[N_INPUTS * k];
                u_try[k].alpha += t * d[N_INPUTS * k + 1];
            }
            let (traj_try, phi_try, _) = phi_at(&u_try, s0, ctx)?;
            let m_try = objective(&traj_try, window, ctx) + rho * violation(&phi_try, &fixed);
            if m_try <= m0 + 1e-4 * t * descent.min(0.0) + 1e-12 * (1.0 + m0.abs()) {
                u = u_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        last_step_norm = t * step_norm;
        if accepted {
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= 8 {
                break;
            }
        }
    }

    assemble_exact_solution(s0, &u, window, ctx, last_mu, sqp_iters, converged, last_step_norm)
}

#[allow(clippy::too_many_arguments)]
fn assemble_exact_solution(
    s0: &RobotState,
    u: &[ControlInput],
    window: &Trajectory,
    ctx: &SolverContext,
    mu: Vec<f64>,
    sqp_iters: usize,
    converged: bool,
    step_norm: f64,
) -> Result<OcpSolution> {
    let n = window.horizon();
    let layout = row_layout(ctx.blocks, n);
    let (traj, phi, eval) = phi_at(u, s0, ctx)?;

    // Total row gradients over the stacked trajectory, for multiplier
    // recovery and the reduced stationarity residual: exact constraint
    // parts, backoff parts by central differences.
    let z0 = stack_trajectory(&traj);
    let dim = z0.len();
    let mut g_rows = DMatrix::<f64>::zeros(layout.len(), dim);
    for (i, entry) in layout.iter().enumerate() {
        let template = row_template(ctx.blocks, entry);
        let (gs, gu) = crate::solver::row_gradients(entry, template, &traj, ctx.spec);
        for c in 0..N_STATES {
            g_rows[(i, N_STATES * entry.stage + c)] = gs[c];
        }
        if !entry.terminal {
            for c in 0..N_INPUTS {
                g_rows[(i, N_STATES * (n + 1) + N_INPUTS * entry.stage + c)] = gu[c];
            }
        }
    }
    for j in 0..dim {
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[j] += FD_STEP;
        zm[j] -= FD_STEP;
        let tp = unstack_trajectory(&zp, n);
        let tm = unstack_trajectory(&zm, n);
        let bp = update_backoffs(&tp, ctx)?.backoffs;
        let bm = update_backoffs(&tm, ctx)?.backoffs;
        for i in 0..layout.len() {
            g_rows[(i, j)] += beta_fd(bp[i], bm[i], eval.backoffs[i]);
        }
    }

    // Backward multiplier recovery with the cross-stage row terms included.
    let w = &ctx.spec.weights;
    let mut lambda = vec![Vector5::zeros(); n + 1];
    let row_state_grad = |i: usize, k: usize| -> Vector5<f64> {
        let mut g = Vector5::zeros();
        for c in 0..N_STATES {
            g[c] = g_rows[(i, N_STATES * k + c)];
        }
        g
    };
    let mu_rows_at = |k: usize| -> Vector5<f64> {
        let mut acc = Vector5::zeros();
        for (i, m) in mu.iter().enumerate() {
            if *m != 0.0 {
                acc += row_state_grad(i, k) * *m;
            }
        }
        acc
    };
    lambda[n] = w.q_e * state_error(&traj.states[n], &window.states[n]) * 2.0 + mu_rows_at(n);
    for k in (1..n).rev() {
        let (_, a, _) = integrate_with_sensitivities(&traj.states[k], &traj.inputs[k], ctx.disc);
        lambda[k] = w.q * state_error(&traj.states[k], &window.states[k]) * 2.0
            + a.transpose() * lambda[k + 1]
            + mu_rows_at(k);
    }
    if n >= 1 {
        let (_, a0, _) = integrate_with_sensitivities(&traj.states[0], &traj.inputs[0], ctx.disc);
        lambda[0] = w.q * state_error(&traj.states[0], &window.states[0]) * 2.0
            + a0.transpose() * lambda[1]
            + mu_rows_at(0);
    }

    // Reduced stationarity: grad J + C^T mu over u, with C the total FD
    // Jacobian (state parts folded through the rollout sensitivities).
    let sens = rollout_sensitivities(&traj, ctx);
    let nu_dim = N_INPUTS * n;
    let mut resid = DVector::<f64>::zeros(nu_dim);
    for k in 0..=n {
        let qmat = if k == n { w.q_e } else { w.q };
        let e = state_error(&traj.states[k], &window.states[k]);
        let gk = qmat * e * 2.0;
        let mk = &sens[k];
        for j in 0..nu_dim {
            let col = Vector5::from_iterator(mk.column(j).iter().copied());
            resid[j] += gk.dot(&col);
        }
    }
    for k in 0..n {
        let du = traj.inputs[k].to_vector() - window.inputs[k].to_vector();
        let gu = w.r * du * 2.0;
        for i in 0..N_INPUTS {
            resid[N_INPUTS * k + i] += gu[i];
        }
    }
    for (i, m) in mu.iter().enumerate() {
        if *m != 0.0 {
            // Row gradient over u: direct u part + state parts chained.
            for j in 0..nu_dim {
                let mut acc = g_rows[(i, N_STATES * (n + 1) + j)];
                for k in 0..=n {
                    let gs = row_state_grad(i, k);
                    let col = Vector5::from_iterator(sens[k].column(j).iter().copied());
                    acc += gs.dot(&col);
                }
                resid[j] += m * acc;
            }
        }
    }

    let mut feas: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut rows = Vec::with_capacity(layout.len());
    for (i, entry) in layout.iter().enumerate() {
        let template = row_template(ctx.blocks, entry);
        let is_fixed = crate::solver::row_is_fixed(entry, template);
        if !is_fixed {
            feas = feas.max(phi[i]);
            comp = comp.max((mu[i] * phi[i]).abs());
        }
        rows.push(RowRecord {
            stage: entry.stage,
            terminal: entry.terminal,
            kind: template.kind,
            name: template.name.clone(),
            value: eval.values[i],
            backoff: eval.backoffs[i],
            mu: mu[i],
            slack: 0.0,
            fixed: is_fixed,
        });
    }

    Ok(OcpSolution {
        states: traj.states.clone(),
        inputs: traj.inputs.clone(),
        lambdas: lambda,
        rows,
        sigmas: eval.sigmas,
        kkt: KktResiduals {
            stationarity: resid.amax(),
            feasibility: feas.max(0.0),
            complementarity: comp,
        },
        objective: objective(&traj, window, ctx),
        qp_iterations: sqp_iters,
        outer_iterations: sqp_iters,
        converged: converged && feas <= ctx.settings.tol_feasibility.max(1e-9),
        step_norm,
        backoff_change: 0.0,
        max_slack: 0.0,
    })
}

/// Brute-force reference for dense QPs: tries active subsets by increasing
/// cardinality; the first subset whose equality-constrained solution has
/// nonnegative multipliers and violates nothing is the unique optimum.
pub fn solve_qp_by_enumeration(qp: &DenseQp) -> Result<QpSolution> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let mut tried = 0usize;

    for card in 0..=m.min(n) {
        let mut subset: Vec<usize> = (0..card).collect();
        loop {
            tried += 1;
            if let Some(sol) = try_active_set(qp, &subset) {
                return Ok(QpSolution {
                    x: sol.0,
                    mu: sol.1,
                    active: subset,
                    iterations: tried,
                    objective: sol.2,
                });
            }
            if card == 0 || !advance_combination(&mut subset, m) {
                break;
            }
        }
    }
    Err(Error::QpInfeasible(
        "no active set yields a KKT-consistent point".into(),
    ))
}

/// Next lexicographic subset of {0..m-1} with the same cardinality.
fn advance_combination(subset: &mut [usize], m: usize) -> bool {
    let card = subset.len();
    let mut i = card;
    while i > 0 {
        i -= 1;
        if subset[i] != i + m - card {
            subset[i] += 1;
            for j in i + 1..card {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn try_active_set(qp: &DenseQp, subset: &[usize]) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let q = subset.len();
    let mut kkt = DMatrix::<f64>::zeros(n + q, n + q);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    for (i, &row) in subset.iter().enumerate() {
        for j in 0..n {
            kkt[(n + i, j)] = qp.c[(row, j)];
            kkt[(j, n + i)] = qp.c[(row, j)];
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + q);
    for i in 0..n {
        rhs[i] = -qp.g[i];
    }
    for (i, &row) in subset.iter().enumerate() {
        rhs[n + i] = qp.d[row];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let x = sol.rows(0, n).into_owned();
    let mu_s = sol.rows(n, q).into_owned();
    if mu_s.iter().any(|m| *m < -1e-10) {
        return None;
    }
    for i in 0..m {
        let mut v = -qp.d[i];
        for j in 0..n {
            v += qp.c[(i, j)] * x[j];
        }
        if v > 1e-8 {
            return None;
        }
    }
    let mut mu = DVector::<f64>::zeros(m);
    for (i, &row) in subset.iter().enumerate() {
        mu[row] = mu_s[i].max(0.0);
    }
    let objective = qp.objective(&x);
    Some((x, mu, objective))
}
