//! Multiple-shooting transcription of the finite-horizon problem.
//!
//! Decision vector layout (N intervals): `[c_0, s_1, c_1, s_2, ..., c_{N-1}, s_N]`
//! with scaled controls `c_i = (u1/u_max, u2/u_max, v/v_scale)` and node
//! states `s_i = (q, qdot, theta, thetadot)`. Node 0 is the measured state and
//! is not a decision variable. Interval `i` touches only `s_i, c_i, s_{i+1}`,
//! which keeps every Hessian banded.

use super::cost::{CostWeights, Mode};
use crate::dynamics::{
    augmented_rhs_vec, AugmentedState, ConstraintSet, PathParamConstraint, PathSpec, RobotParams,
};
use crate::terminal_set::{TerminalSet, VelocityBand};
use crate::transverse::{terminal_u_with_v, terminal_v, to_transverse};
use nalgebra::{Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CTRL: usize = 3;
pub const STATE: usize = 6;
pub const BLOCK: usize = CTRL + STATE;
/// Residuals per grid point: (e, edot, theta or speed error).
const RES_PER_POINT: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Optional end penalty; only time-dependent penalties are supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndPenalty {
    Zero,
    /// c_bar / alpha * exp(-alpha (t - t_origin))
    Exponential { c_bar: f64, alpha: f64, t_origin: f64 },
}

impl EndPenalty {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            EndPenalty::Zero => 0.0,
            EndPenalty::Exponential {
                c_bar,
                alpha,
                t_origin,
            } => c_bar / alpha * (-alpha * (t - t_origin)).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Cap on inner (Newton) iterations summed over outer iterations.
    pub max_iter: usize,
    pub max_outer: usize,
    /// Projected-gradient tolerance of the augmented Lagrangian.
    pub kkt_tol: f64,
    /// Constraint violation accepted before the final rollout.
    pub feas_tol: f64,
    /// Violation above which the solve is reported infeasible.
    pub infeasible_tol: f64,
    pub fd_step: f64,
    pub mu_init: f64,
    pub mu_max: f64,
    /// Relative tightening of the joint-velocity bound inside the OCP.
    pub qdot_backoff: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            max_outer: 25,
            kkt_tol: 1e-6,
            feas_tol: 1e-8,
            infeasible_tol: 1e-4,
            fd_step: 1e-6,
            mu_init: 1e2,
            mu_max: 1e10,
            qdot_backoff: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub params: RobotParams,
    pub path: PathSpec,
    pub constraints: ConstraintSet,
    pub terminal: TerminalSet,
    /// Replaces the eta polytope when a path speed is assigned.
    pub band: Option<VelocityBand>,
    pub weights: CostWeights,
    pub mode: Mode,
    pub horizon: f64,
    pub intervals: usize,
    pub substep: f64,
    pub x0: AugmentedState,
    pub t0: f64,
    pub end_penalty: EndPenalty,
    pub options: SolverOptions,
}

impl OcpProblem {
    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: &str| Err(ProblemError::Invalid(m.to_string()));
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.intervals < 2 {
            return bad("need at least two shooting intervals");
        }
        if !(self.substep > 0.0) {
            return bad("integration substep must be positive");
        }
        let ratio = self.horizon / self.intervals as f64 / self.substep;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad("shooting interval must be a multiple of the integration substep");
        }
        if self.mode.is_velocity() != self.band.is_some() {
            return bad("a speed band is required exactly in velocity-assigned mode");
        }
        if self.mode.is_velocity() && self.constraints.z_set != PathParamConstraint::Free {
            return bad("velocity-assigned mode requires an unconstrained path parameter");
        }
        self.weights.validate().map_err(ProblemError::Invalid)?;
        if !self.x0.to_vector().iter().all(|v| v.is_finite()) {
            return bad("initial state must be finite");
        }
        Ok(())
    }

    pub fn interval_length(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn substeps_per_interval(&self) -> usize {
        (self.interval_length() / self.substep).round() as usize
    }

    pub fn n_vars(&self) -> usize {
        BLOCK * self.intervals
    }

    pub fn v_scale(&self) -> f64 {
        self.constraints.v_min.abs().max(self.constraints.v_max)
    }

    /// Terminal virtual input for the configured terminal set.
    pub fn terminal_v(&self, s: &AugmentedState) -> f64 {
        match &self.band {
            Some(b) => b.terminal_v(s.z.thetadot),
            None => terminal_v(&s.z.as_vector(), &self.terminal.eta_gain),
        }
    }

    /// Terminal pair (u_E, v_E) at `s`, without saturation.
    pub fn terminal_controls(&self, s: &AugmentedState) -> (Vector2<f64>, f64) {
        let v = self.terminal_v(s);
        let c = to_transverse(s, &self.path);
        (
            terminal_u_with_v(&c, &self.terminal.xi_gain, v, &self.params, &self.path),
            v,
        )
    }

    pub fn scale_controls(&self, u: &Vector2<f64>, v: f64) -> [f64; 3] {
        [
            u[0] / self.constraints.u_max,
            u[1] / self.constraints.u_max,
            v / self.v_scale(),
        ]
    }

    pub fn unscale_controls(&self, c: &[f64]) -> (Vector2<f64>, f64) {
        (
            Vector2::new(c[0], c[1]) * self.constraints.u_max,
            c[2] * self.v_scale(),
        )
    }

    pub fn membership_margin(&self, s: &AugmentedState) -> f64 {
        match &self.band {
            Some(b) => self.terminal.membership_velocity(s, &self.path, b).margin(),
            None => self.terminal.membership(s, &self.path).margin(),
        }
    }
}

/// Evaluator for one transcribed problem.
pub struct Nlp<'a> {
    pub p: &'a OcpProblem,
    pub n: usize,
    pub n_sub: usize,
    pub h: f64,
    pub dt: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Objective is divided by this to keep it O(1).
    pub cost_scale: f64,
    pub out_len: usize,
    pub res_len: usize,
    pub n_terminal: usize,
    x0: Vector6<f64>,
    sqrt_q: [f64; 5],
    sqrt_r: [f64; 3],
    qdot_lim: f64,
}

/// Everything computed from one rollout of the decision vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Per interval: [end state (6), residuals, scaled interior joint velocities].
    pub outs: Vec<Vec<f64>>,
    /// Scaled objective.
    pub cost: f64,
    pub defects: Vec<f64>,
    /// Inequality values c <= 0: interior velocity constraints, then terminal.
    pub ineq: Vec<f64>,
    pub finite: bool,
}

pub fn transcribe(p: &OcpProblem) -> Result<Nlp<'_>, ProblemError> {
    p.validate()?;
    let n_sub = p.substeps_per_interval();
    let dt = p.interval_length();
    let h = dt / n_sub as f64;
    let n = p.n_vars();
    let c = &p.constraints;
    let qdot_lim = c.qdot_max * (1.0 - p.options.qdot_backoff);
    let vs = p.v_scale();
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    let poly = &p.terminal.eta_poly;
    for i in 0..p.intervals {
        let b = BLOCK * i;
        lo[b] = -1.0;
        hi[b] = 1.0;
        lo[b + 1] = -1.0;
        hi[b + 1] = 1.0;
        lo[b + 2] = c.v_min / vs;
        hi[b + 2] = c.v_max / vs;
        let s = b + CTRL;
        for j in 2..4 {
            lo[s + j] = -qdot_lim;
            hi[s + j] = qdot_lim;
        }
        let last = i + 1 == p.intervals;
        if c.z_set == PathParamConstraint::Bounded {
            lo[s + 4] = p.path.theta0;
            hi[s + 4] = p.path.theta1;
            lo[s + 5] = 0.0;
        }
        if last {
            match &p.band {
                None => {
                    lo[s + 4] = lo[s + 4].max(poly.theta0);
                    hi[s + 4] = hi[s + 4].min(0.0);
                    lo[s + 5] = 0.0;
                    hi[s + 5] = poly.thetadot_bar;
                }
                Some(band) => {
                    lo[s + 5] = band.thetadot_ref - band.band;
                    hi[s + 5] = band.thetadot_ref + band.band;
                }
            }
        }
    }
    let res_len = (n_sub + 1) * RES_PER_POINT + CTRL;
    let out_len = STATE + res_len + 2 * (n_sub - 1);
    let q = &p.weights.q_diag;
    let r = &p.weights.r_diag;
    let cost_scale = q.iter().cloned().fold(1.0, f64::max) * p.horizon;
    Ok(Nlp {
        p,
        n,
        n_sub,
        h,
        dt,
        lo,
        hi,
        cost_scale,
        out_len,
        res_len,
        n_terminal: if p.band.is_some() { 1 } else { 2 },
        x0: p.x0.to_vector(),
        sqrt_q: q.map(f64::sqrt),
        sqrt_r: r.map(f64::sqrt),
        qdot_lim,
    })
}

impl<'a> Nlp<'a> {
    pub fn n_defects(&self) -> usize {
        STATE * self.p.intervals
    }

    pub fn n_interior(&self) -> usize {
        2 * (self.n_sub - 1) * self.p.intervals
    }

    pub fn n_ineq(&self) -> usize {
        self.n_interior() + self.n_terminal
    }

    pub fn ctrl_index(&self, i: usize) -> usize {
        BLOCK * i
    }

    /// Offset of node `i >= 1`.
    pub fn node_index(&self, i: usize) -> usize {
        BLOCK * (i - 1) + CTRL
    }

    pub fn node(&self, x: &[f64], i: usize) -> Vector6<f64> {
        if i == 0 {
            self.x0
        } else {
            Vector6::from_column_slice(&x[self.node_index(i)..self.node_index(i) + STATE])
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[k], self.hi[k]);
        }
    }

    /// Integrates one interval and fills `out`; returns false on a dynamics fault.
    pub fn eval_interval(&self, s: &Vector6<f64>, c: &[f64], out: &mut [f64]) -> bool {
        let (u, v) = self.p.unscale_controls(c);
        let path = &self.p.path;
        let inv = 1.0 / self.cost_scale.sqrt();
        let mut x = *s;
        let mut ok = true;
        let res = &mut out[STATE..STATE + self.res_len];
        let point = |j: usize, x: &Vector6<f64>, res: &mut [f64]| {
            let w = if j == 0 || j == self.n_sub {
                0.5 * self.h
            } else {
                self.h
            };
            let sw = w.sqrt() * inv;
            let (p, dp, _) = path.jet(x[4]);
            let mode_term = match self.p.mode {
                Mode::PathFollowing => x[4] - path.theta1,
                Mode::VelocityAssigned { thetadot_ref } => x[5] - thetadot_ref,
            };
            let vals = [
                x[0] - p[0],
                x[1] - p[1],
                x[2] - dp[0] * x[5],
                x[3] - dp[1] * x[5],
                mode_term,
            ];
            for k in 0..RES_PER_POINT {
                res[RES_PER_POINT * j + k] = sw * self.sqrt_q[k] * vals[k];
            }
        };
        point(0, &x, res);
        let qd_off = STATE + self.res_len;
        let params = &self.p.params;
        let h = self.h;
        for j in 1..=self.n_sub {
            let mut f = |y: &Vector6<f64>| augmented_rhs_vec(y, &u, v, params);
            match crate::dynamics::rk4_step(&mut f, &x, h) {
                Ok(next) => x = next,
                Err(_) => {
                    ok = false;
                    x = Vector6::repeat(f64::NAN);
                }
            }
            point(j, &x, &mut out[STATE..STATE + self.res_len]);
            if j < self.n_sub {
                let k = qd_off + 2 * (j - 1);
                out[k] = x[2] / self.p.constraints.qdot_max;
                out[k + 1] = x[3] / self.p.constraints.qdot_max;
            }
        }
        let sw = self.dt.sqrt() * inv;
        let ut = self.p.weights.u_tilde();
        let base = STATE + (self.n_sub + 1) * RES_PER_POINT;
        out[base] = sw * self.sqrt_r[0] * (u[0] - ut[0]);
        out[base + 1] = sw * self.sqrt_r[1] * (u[1] - ut[1]);
        out[base + 2] = sw * self.sqrt_r[2] * v;
        out[..STATE].copy_from_slice(x.as_slice());
        ok && x.iter().all(|v| v.is_finite())
    }

    pub fn evaluate(&self, x: &[f64]) -> Evaluation {
        let n_int = self.p.intervals;
        let mut outs = Vec::with_capacity(n_int);
        let mut finite = true;
        let mut cost = 0.0;
        let mut defects = vec![0.0; self.n_defects()];
        let mut ineq = Vec::with_capacity(self.n_ineq());
        let lim = self.qdot_lim / self.p.constraints.qdot_max;
        for i in 0..n_int {
            let s = self.node(x, i);
            let ci = self.ctrl_index(i);
            let mut out = vec![0.0; self.out_len];
            finite &= self.eval_interval(&s, &x[ci..ci + CTRL], &mut out);
            cost += out[STATE..STATE + self.res_len].iter().map(|r| r * r).sum::<f64>();
            let next = self.node(x, i + 1);
            for k in 0..STATE {
                defects[STATE * i + k] = out[k] - next[k];
            }
            for qd in &out[STATE + self.res_len..] {
                ineq.push(qd.abs() - lim);
            }
            outs.push(out);
        }
        ineq.extend(self.terminal_values(&self.node(x, n_int)));
        Evaluation {
            outs,
            cost,
            defects,
            ineq,
            finite: finite && cost.is_finite(),
        }
    }

    fn xi_and_jacobian(&self, s: &Vector6<f64>) -> (Vector4<f64>, nalgebra::Matrix4x6<f64>) {
        let (p, dp, ddp) = self.p.path.jet(s[4]);
        let xi = Vector4::new(
            s[0] - p[0],
            s[1] - p[1],
            s[2] - dp[0] * s[5],
            s[3] - dp[1] * s[5],
        );
        let mut j = nalgebra::Matrix4x6::zeros();
        for k in 0..4 {
            j[(k, k)] = 1.0;
        }
        j[(0, 4)] = -dp[0];
        j[(1, 4)] = -dp[1];
        j[(2, 4)] = -ddp[0] * s[5];
        j[(3, 4)] = -ddp[1] * s[5];
        j[(2, 5)] = -dp[0];
        j[(3, 5)] = -dp[1];
        (xi, j)
    }

    /// Terminal inequalities: scaled ellipsoid and, in path mode, n1' eta.
    pub fn terminal_values(&self, s: &Vector6<f64>) -> Vec<f64> {
        let ts = &self.p.terminal;
        let (xi, _) = self.xi_and_jacobian(s);
        let mut out = vec![ts.ellipsoid_value(&xi) / ts.level - 1.0];
        if self.p.band.is_none() {
            out.push(ts.eta_poly.n1.dot(&Vector2::new(s[4], s[5])));
        }
        out
    }

    pub fn terminal_gradients(&self, s: &Vector6<f64>) -> Vec<Vector6<f64>> {
        let ts = &self.p.terminal;
        let (xi, j) = self.xi_and_jacobian(s);
        let mut out = vec![j.transpose() * (ts.p_xi * xi) * (2.0 / ts.level)];
        if self.p.band.is_none() {
            let n1 = ts.eta_poly.n1;
            out.push(Vector6::new(0.0, 0.0, 0.0, 0.0, n1[0], n1[1]));
        }
        out
    }

    /// Forward-difference Jacobian of interval `i` outputs with respect to
    /// its local variables (s_i then c_i); for i = 0 only the controls.
    pub fn interval_jacobian(&self, x: &[f64], i: usize, base: &[f64]) -> Vec<Vec<f64>> {
        let mut s = self.node(x, i);
        let ci = self.ctrl_index(i);
        let mut c = [x[ci], x[ci + 1], x[ci + 2]];
        let mut cols = Vec::with_capacity(BLOCK);
        let mut out = vec![0.0; self.out_len];
        let step = self.p.options.fd_step;
        if i > 0 {
            for k in 0..STATE {
                let orig = s[k];
                let hk = step * (1.0 + orig.abs());
                s[k] = orig + hk;
                self.eval_interval(&s, &c, &mut out);
                s[k] = orig;
                cols.push(out.iter().zip(base).map(|(a, b)| (a - b) / hk).collect());
            }
        }
        for k in 0..CTRL {
            let orig = c[k];
            let hk = step * (1.0 + orig.abs());
            // Step into the box so the perturbed control stays admissible.
            let hk = if orig + hk > self.hi[ci + k] { -hk } else { hk };
            c[k] = orig + hk;
            self.eval_interval(&s, &c, &mut out);
            c[k] = orig;
            cols.push(out.iter().zip(base).map(|(a, b)| (a - b) / hk).collect());
        }
        cols
    }

    /// Substep states of a rollout with defects ignored (each interval
    /// starts at its own node).
    pub fn dense_states(&self, x: &[f64]) -> Vec<Vector6<f64>> {
        let mut out = Vec::with_capacity(self.p.intervals * self.n_sub + 1);
        out.push(self.x0);
        for i in 0..self.p.intervals {
            let ci = self.ctrl_index(i);
            let (u, v) = self.p.unscale_controls(&x[ci..ci + CTRL]);
            let mut s = self.node(x, i);
            for _ in 0..self.n_sub {
                let mut f = |y: &Vector6<f64>| augmented_rhs_vec(y, &u, v, &self.p.params);
                s = crate::dynamics::rk4_step(&mut f, &s, self.h)
                    .unwrap_or_else(|_| Vector6::repeat(f64::NAN));
                out.push(s);
            }
        }
        out
    }

    /// Replaces every node by the integrated end state of the previous interval.
    pub fn rollout(&self, x: &mut [f64]) {
        let mut out = vec![0.0; self.out_len];
        for i in 0..self.p.intervals {
            let s = self.node(x, i);
            let ci = self.ctrl_index(i);
            let c = [x[ci], x[ci + 1], x[ci + 2]];
            self.eval_interval(&s, &c, &mut out);
            let ni = self.node_index(i + 1);
            x[ni..ni + STATE].copy_from_slice(&out[..STATE]);
        }
    }
}
