//! Augmented-Lagrangian solver for the transcribed problem.
//!
//! Outer loop: PHR multiplier updates on the shooting defects and the
//! inequality constraints. Inner loop: projected Newton on the box-constrained
//! augmented Lagrangian, with a Gauss-Newton Hessian assembled from
//! finite-difference interval Jacobians and factorized as a band matrix.

use super::banded::SymBand;
use super::qp::solve_box_qp;
use super::problem::{transcribe, Evaluation, Nlp, OcpProblem, ProblemError, BLOCK, CTRL, STATE};
use crate::dynamics::AugmentedState;
use nalgebra::{DMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;
const RHO_MIN: f64 = 1e-10;
const RHO_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

/// Primal point and multipliers used to start a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub lambda_eq: Vec<f64>,
    pub lambda_in: Vec<f64>,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Piecewise-constant inputs, one per shooting interval.
    pub u: Vec<Vector2<f64>>,
    pub v: Vec<f64>,
    /// Rolled-out node states s_0..s_N.
    pub nodes: Vec<AugmentedState>,
    /// Rolled-out states on the integration grid.
    pub dense: Vec<Vector6<f64>>,
    /// Integral of the stage cost over the horizon.
    pub stage_cost: f64,
    pub end_penalty: f64,
    /// stage_cost + end_penalty.
    pub cost: f64,
    /// Projected-gradient norm of the augmented Lagrangian.
    pub kkt: f64,
    /// Largest violation of the original constraints after the final rollout.
    pub violation: f64,
    pub terminal_margin: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Stage cost at the end of every outer iteration.
    pub cost_history: Vec<f64>,
    pub lambda_eq: Vec<f64>,
    pub lambda_in: Vec<f64>,
    pub mu: f64,
}

impl OcpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            lambda_eq: self.lambda_eq.clone(),
            lambda_in: self.lambda_in.clone(),
            mu: self.mu,
        }
    }

    pub fn terminal_state(&self) -> &AugmentedState {
        self.nodes.last().expect("at least one node")
    }
}

struct Multipliers<'m> {
    eq: &'m [f64],
    ineq: &'m [f64],
    mu: f64,
}

/// Objective and penalty parts of the augmented Lagrangian, kept apart so
/// that step comparisons subtract like terms.
#[derive(Clone, Copy)]
struct Merit {
    f: f64,
    pen: f64,
    al: f64,
}

impl Merit {
    fn decrease_from(&self, old: &Merit) -> f64 {
        (self.f - old.f) + (self.pen - old.pen) + (self.al - old.al)
    }
}

fn merit(ev: &Evaluation, m: &Multipliers, pen: f64) -> Merit {
    if !ev.finite {
        return Merit {
            f: f64::INFINITY,
            pen,
            al: 0.0,
        };
    }
    let mut al = 0.0;
    for (d, l) in ev.defects.iter().zip(m.eq) {
        al += l * d + 0.5 * m.mu * d * d;
    }
    for (c, l) in ev.ineq.iter().zip(m.ineq) {
        let t = (l + m.mu * c).max(0.0);
        al += (t * t - l * l) / (2.0 * m.mu);
    }
    Merit { f: ev.cost, pen, al }
}

fn violation(ev: &Evaluation) -> f64 {
    let d = ev.defects.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    ev.ineq.iter().fold(d, |a, c| a.max(*c))
}

/// Global indices of the variables interval `i` depends on: (s_i, c_i, s_{i+1}).
fn interval_vars(nlp: &Nlp, i: usize) -> Vec<usize> {
    let start = if i == 0 { 0 } else { nlp.node_index(i) };
    (start..nlp.node_index(i + 1) + STATE).collect()
}

/// Symmetric-rank-one estimate of the second-order terms Gauss-Newton drops
/// (output curvature weighted by residuals and multipliers), one block per
/// interval over its own variables (s_i, c_i).
struct Curvature {
    blocks: Vec<Vec<f64>>,
    last: Vec<Option<(Vec<f64>, Vec<Vec<f64>>)>>,
}

impl Curvature {
    fn new(n_int: usize) -> Self {
        Self {
            blocks: vec![Vec::new(); n_int],
            last: vec![None; n_int],
        }
    }

    /// Secant pair from Jacobian columns at two points with the current weights.
    fn update(&mut self, i: usize, xl: Vec<f64>, cols: &[Vec<f64>], w: &[f64]) {
        let mc = cols.len();
        if self.blocks[i].is_empty() {
            self.blocks[i] = vec![0.0; mc * mc];
        }
        if let Some((x_old, c_old)) = &self.last[i] {
            let s: Vec<f64> = (0..mc).map(|a| xl[a] - x_old[a]).collect();
            let s_norm = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if s_norm > 1e-6 {
                let a_blk = &mut self.blocks[i];
                let y: Vec<f64> = (0..mc)
                    .map(|a| {
                        cols[a].iter().zip(&c_old[a]).zip(w).map(|((n, o), wk)| wk * (n - o)).sum()
                    })
                    .collect();
                let r: Vec<f64> = (0..mc)
                    .map(|a| y[a] - (0..mc).map(|b| a_blk[a * mc + b] * s[b]).sum::<f64>())
                    .collect();
                let den: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum();
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                if den.abs() > 1e-8 * rn * sn && den != 0.0 {
                    for a in 0..mc {
                        for b in 0..mc {
                            a_blk[a * mc + b] += r[a] * r[b] / den;
                        }
                    }
                }
            }
        }
        self.last[i] = Some((xl, cols.to_vec()));
    }
}

/// Replaces the symmetric matrix held in the lower triangle of `h` by its
/// nearest positive semidefinite matrix.
fn clip_psd(h: &mut [f64], n: usize) {
    let m = DMatrix::from_fn(n, n, |a, b| if a >= b { h[a * n + b] } else { h[b * n + a] });
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return;
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&d) * q.transpose();
    for a in 0..n {
        for b in 0..=a {
            h[a * n + b] = r[(a, b)];
        }
    }
}

/// Gradient and Hessian model of the augmented Lagrangian: Gauss-Newton
/// plus the secant curvature blocks.
fn assemble(
    nlp: &Nlp,
    x: &[f64],
    ev: &Evaluation,
    m: &Multipliers,
    hess: &mut SymBand,
    curv: &mut Curvature,
) -> Vec<f64> {
    let mut g = vec![0.0; nlp.n];
    hess.fill_zero();
    let n_int = nlp.p.intervals;
    let res0 = STATE;
    let qd0 = STATE + nlp.res_len;
    let per = 2 * (nlp.n_sub - 1);
    for i in 0..n_int {
        let out = &ev.outs[i];
        let cols = nlp.interval_jacobian(x, i, out);
        let mc = cols.len();
        let nl = mc + STATE;
        let vars = interval_vars(nlp, i);
        debug_assert_eq!(vars.len(), nl);
        let mut gl = vec![0.0; nl];
        let mut hl = vec![0.0; nl * nl];
        let mut row = vec![0.0; nl];
        // Least-squares residuals.
        for k in res0..res0 + nlp.res_len {
            let r = out[k];
            for a in 0..mc {
                row[a] = cols[a][k];
            }
            for a in 0..mc {
                gl[a] += 2.0 * r * row[a];
                for b in 0..=a {
                    hl[a * nl + b] += 2.0 * row[a] * row[b];
                }
            }
        }
        // Shooting defects end(s_i, c_i) - s_{i+1}.
        for k in 0..STATE {
            let d = ev.defects[STATE * i + k];
            let y = m.eq[STATE * i + k] + m.mu * d;
            row.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..mc {
                row[a] = cols[a][k];
            }
            row[mc + k] = -1.0;
            for a in 0..nl {
                gl[a] += y * row[a];
                for b in 0..=a {
                    hl[a * nl + b] += m.mu * row[a] * row[b];
                }
            }
        }
        // Joint-velocity bounds inside the interval.
        for r in 0..per {
            let ci = per * i + r;
            let t = m.ineq[ci] + m.mu * ev.ineq[ci];
            if t <= 0.0 {
                continue;
            }
            let sign = out[qd0 + r].signum();
            for a in 0..mc {
                row[a] = sign * cols[a][qd0 + r];
            }
            for a in 0..mc {
                gl[a] += t * row[a];
                for b in 0..=a {
                    hl[a * nl + b] += m.mu * row[a] * row[b];
                }
            }
        }
        let mut w = vec![0.0; nlp.out_len];
        for k in 0..STATE {
            w[k] = m.eq[STATE * i + k] + m.mu * ev.defects[STATE * i + k];
        }
        for k in res0..res0 + nlp.res_len {
            w[k] = 2.0 * out[k];
        }
        for r in 0..per {
            let t = m.ineq[per * i + r] + m.mu * ev.ineq[per * i + r];
            if t > 0.0 {
                w[qd0 + r] = t * out[qd0 + r].signum();
            }
        }
        curv.update(i, vars[..mc].iter().map(|&k| x[k]).collect(), &cols, &w);
        let blk = &curv.blocks[i];
        for a in 0..mc {
            for b in 0..=a {
                hl[a * nl + b] += blk[a * mc + b];
            }
        }
        clip_psd(&mut hl, nl);
        for a in 0..nl {
            g[vars[a]] += gl[a];
            for b in 0..=a {
                let v = hl[a * nl + b];
                if v != 0.0 {
                    hess.add(vars[a], vars[b], v);
                }
            }
        }
    }
    // Terminal constraints on s_N.
    let sn = nlp.node(x, n_int);
    let base = nlp.node_index(n_int);
    let off = nlp.n_interior();
    for (j, grad) in nlp.terminal_gradients(&sn).iter().enumerate() {
        let t = m.ineq[off + j] + m.mu * ev.ineq[off + j];
        if t <= 0.0 {
            continue;
        }
        for a in 0..STATE {
            g[base + a] += t * grad[a];
            for b in 0..=a {
                hess.add(base + a, base + b, m.mu * grad[a] * grad[b]);
            }
        }
    }
    g
}

fn projected_gradient_norm(nlp: &Nlp, x: &[f64], g: &[f64]) -> f64 {
    (0..nlp.n).fold(0.0f64, |a, k| {
        let t = (x[k] - g[k]).clamp(nlp.lo[k], nlp.hi[k]);
        a.max((x[k] - t).abs())
    })
}

struct InnerResult {
    iterations: usize,
    kkt: f64,
}

/// Projected Newton iterations on the augmented Lagrangian for fixed multipliers.
fn inner_solve(
    nlp: &Nlp,
    x: &mut Vec<f64>,
    m: &Multipliers,
    pen: f64,
    tol: f64,
    budget: usize,
    curv: &mut Curvature,
) -> InnerResult {
    let bw = 2 * BLOCK - 3;
    let mut hess = SymBand::zeros(nlp.n, bw);
    let mut ev = nlp.evaluate(x);
    let mut cur = merit(&ev, m, pen);
    let mut rho = RHO_MIN;
    let mut kkt = f64::INFINITY;
    let mut it = 0;
    while it < budget {
        let g = assemble(nlp, x, &ev, m, &mut hess, curv);
        kkt = projected_gradient_norm(nlp, x, &g);
        if kkt <= tol || !cur.f.is_finite() {
            break;
        }
        it += 1;
        let dlo: Vec<f64> = (0..nlp.n).map(|k| nlp.lo[k] - x[k]).collect();
        let dhi: Vec<f64> = (0..nlp.n).map(|k| nlp.hi[k] - x[k]).collect();
        let floor = 1e-8 * (0..nlp.n).fold(1.0f64, |a, k| a.max(hess.get(k, k)));
        let mut accepted = false;
        while rho <= RHO_MAX {
            let mut h = hess.clone();
            for k in 0..nlp.n {
                h.add(k, k, rho * hess.get(k, k).max(floor));
            }
            let qp = solve_box_qp(&h, &g, &dlo, &dhi, 1e-3 * kkt);
            if !qp.ok {
                rho *= 100.0;
                continue;
            }
            let p = qp.d;
            let slope: f64 = (0..nlp.n).map(|k| g[k] * p[k]).sum();
            if !(slope < 0.0) {
                rho *= 100.0;
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..MAX_BACKTRACK {
                let mut xt: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
                nlp.project(&mut xt);
                let evt = nlp.evaluate(&xt);
                let trial = merit(&evt, m, pen);
                if trial.f.is_finite() && trial.decrease_from(&cur) <= ARMIJO * alpha * slope {
                    if alpha == 1.0 {
                        rho = (rho * 0.1).max(RHO_MIN);
                    }
                    *x = xt;
                    ev = evt;
                    cur = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
            rho *= 100.0;
        }
        if !accepted {
            break;
        }
    }
    InnerResult { iterations: it, kkt }
}

/// Saturated terminal feedback held on each interval, starting from x0.
pub fn cold_start(problem: &OcpProblem) -> Result<WarmStart, ProblemError> {
    let nlp = transcribe(problem)?;
    let mut x = vec![0.0; nlp.n];
    let mut s = problem.x0;
    for i in 0..problem.intervals {
        let (u, v) = problem.terminal_controls(&s);
        let mut c = problem.scale_controls(&u, v);
        for (k, ck) in c.iter_mut().enumerate() {
            let gi = nlp.ctrl_index(i) + k;
            *ck = if ck.is_finite() { ck.clamp(nlp.lo[gi], nlp.hi[gi]) } else { 0.0 };
        }
        let ci = nlp.ctrl_index(i);
        x[ci..ci + CTRL].copy_from_slice(&c);
        let mut out = vec![0.0; nlp.out_len];
        nlp.eval_interval(&s.to_vector(), &c, &mut out);
        let ni = nlp.node_index(i + 1);
        x[ni..ni + STATE].copy_from_slice(&out[..STATE]);
        s = AugmentedState::from_vector(&Vector6::from_column_slice(&out[..STATE]));
    }
    Ok(WarmStart {
        x,
        lambda_eq: vec![0.0; nlp.n_defects()],
        lambda_in: vec![0.0; nlp.n_ineq()],
        mu: problem.options.mu_init,
    })
}

pub fn solve(problem: &OcpProblem, warm: Option<&WarmStart>) -> Result<OcpSolution, ProblemError> {
    let nlp = transcribe(problem)?;
    let start = match warm {
        Some(w) => {
            if w.x.len() != nlp.n || w.lambda_eq.len() != nlp.n_defects() || w.lambda_in.len() != nlp.n_ineq() {
                return Err(ProblemError::Invalid("warm start has the wrong dimension".into()));
            }
            w.clone()
        }
        None => cold_start(problem)?,
    };
    let opts = problem.options;
    let mut x = start.x;
    nlp.project(&mut x);
    let mut lam_eq = start.lambda_eq;
    let mut lam_in = start.lambda_in;
    let mut mu = if start.mu > 0.0 { start.mu } else { opts.mu_init };
    let pen = problem.end_penalty.value(problem.t0 + problem.horizon);

    let mut omega = 1e-2f64.max(opts.kkt_tol);
    let mut total = 0;
    let mut outer = 0;
    let mut kkt = f64::INFINITY;
    let mut prev_viol = f64::INFINITY;
    let mut converged = false;
    let mut cost_history = Vec::new();
    let mut curv = Curvature::new(problem.intervals);
    while outer < opts.max_outer && total < opts.max_iter {
        outer += 1;
        let m = Multipliers {
            eq: &lam_eq,
            ineq: &lam_in,
            mu,
        };
        let r = inner_solve(&nlp, &mut x, &m, pen, omega, opts.max_iter - total, &mut curv);
        total += r.iterations;
        kkt = r.kkt;
        let ev = nlp.evaluate(&x);
        cost_history.push(ev.cost * nlp.cost_scale);
        let viol = violation(&ev);
        if viol <= opts.feas_tol && kkt <= opts.kkt_tol {
            converged = true;
            break;
        }
        for (l, d) in lam_eq.iter_mut().zip(&ev.defects) {
            *l += mu * d;
        }
        for (l, c) in lam_in.iter_mut().zip(&ev.ineq) {
            *l = (*l + mu * c).max(0.0);
        }
        if viol > opts.feas_tol && viol > 0.25 * prev_viol {
            mu = (mu * 10.0).min(opts.mu_max);
        }
        prev_viol = prev_viol.min(viol);
        omega = (omega * 0.1).max(opts.kkt_tol);
    }

    // Final rollout: the reported trajectory is an exact integration of the
    // returned inputs from the measured state.
    nlp.rollout(&mut x);
    let ev = nlp.evaluate(&x);
    let dense = nlp.dense_states(&x);
    let qd_max = problem.constraints.qdot_max;
    let mut viol: f64 = dense
        .iter()
        .map(|s| (s[2].abs().max(s[3].abs()) / qd_max - 1.0).max(0.0))
        .fold(0.0, f64::max);
    let nodes: Vec<AugmentedState> = (0..=problem.intervals)
        .map(|i| AugmentedState::from_vector(&nlp.node(&x, i)))
        .collect();
    let terminal_margin = problem.membership_margin(nodes.last().unwrap());
    viol = viol.max(-terminal_margin);
    if !ev.finite {
        viol = f64::INFINITY;
    }
    let (u, v): (Vec<_>, Vec<_>) = (0..problem.intervals)
        .map(|i| problem.unscale_controls(&x[nlp.ctrl_index(i)..nlp.ctrl_index(i) + CTRL]))
        .unzip();
    let status = if converged && viol <= 1e-6 {
        SolveStatus::Converged
    } else if viol <= opts.infeasible_tol {
        SolveStatus::MaxIter
    } else {
        SolveStatus::Infeasible
    };
    let stage_cost = ev.cost * nlp.cost_scale;
    Ok(OcpSolution {
        status,
        x,
        u,
        v,
        nodes,
        dense,
        stage_cost,
        end_penalty: pen,
        cost: stage_cost + pen,
        kkt,
        violation: viol,
        terminal_margin,
        iterations: total,
        outer_iterations: outer,
        cost_history,
        lambda_eq: lam_eq,
        lambda_in: lam_in,
        mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PathParamState, RobotState};
    use crate::ocp::problem::tests::{default_problem, path_end_state};
    use crate::ocp::problem::EndPenalty;
    use std::time::Instant;

    fn paper_start() -> AugmentedState {
        AugmentedState::new(
            RobotState::new(-5.86, 2.43, 0.0, 0.0),
            PathParamState::new(-5.3, 0.0),
        )
    }

    #[test]
    fn equilibrium_is_optimal() {
        let p = default_problem(path_end_state());
        let sol = solve(&p, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.cost < 1e-4, "{}", sol.cost);
    }

    #[test]
    fn solves_from_path_start() {
        let p = default_problem(paper_start());
        let t = Instant::now();
        let sol = solve(&p, None).unwrap();
        eprintln!(
            "status {:?} cost {} kkt {:e} viol {:e} it {} outer {} {:?}",
            sol.status,
            sol.cost,
            sol.kkt,
            sol.violation,
            sol.iterations,
            sol.outer_iterations,
            t.elapsed()
        );
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.terminal_margin >= -1e-6);
        for u in &sol.u {
            assert!(u.amax() <= p.constraints.u_max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn end_penalty_shifts_cost_only() {
        let p = default_problem(paper_start());
        let a = solve(&p, None).unwrap();
        let mut q = p.clone();
        q.end_penalty = EndPenalty::Exponential {
            c_bar: 3.0,
            alpha: 0.5,
            t_origin: 0.0,
        };
        let b = solve(&q, None).unwrap();
        assert_eq!(a.x, b.x);
        let e = q.end_penalty.value(q.horizon);
        assert!((b.cost - a.cost - e).abs() <= 1e-12 * b.cost.abs().max(1.0));
    }

    #[test]
    fn warm_start_dimension_is_checked() {
        let p = default_problem(path_end_state());
        let w = WarmStart {
            x: vec![0.0; 3],
            lambda_eq: vec![],
            lambda_in: vec![],
            mu: 1.0,
        };
        assert!(solve(&p, Some(&w)).is_err());
    }
}
