//! Sampled-data receding-horizon loop.
//!
//! At every sampling instant the measured robot state and the controller's
//! internal path-parameter state form the OCP initial condition. The first
//! `delta` of the optimal input is applied and the path-parameter state is
//! advanced under the optimal virtual input; it is never reset from the plant.

use crate::dynamics::{
    rk4_step, robot_rhs, AugmentedState, ConstraintSet, DynamicsError, PathParamConstraint,
    PathParamState, PathSpec, RobotParams, RobotState,
};
use crate::ocp::{
    cost::stage_cost_at, shift_warm_start, solve, CostWeights, EndPenalty, Mode, OcpProblem,
    OcpSolution, ProblemError, SolveStatus, SolverOptions,
};
use crate::terminal_set::{SynthesisError, TerminalSet, VelocityBand};
use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

pub const INIT_GRID: usize = 10_000;
/// Weight on (thetadot - thetadot_ref) used by [`MpfcConfig::velocity_assigned`].
/// Of the order of the path-error weights: with the torque-offset penalty
/// of the default weights a smaller value leaves the speed loosely held.
pub const SPEED_ERROR_WEIGHT: f64 = 1e5;

#[derive(Debug, Error)]
pub enum MpfcError {
    #[error("invalid loop configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Band(#[from] SynthesisError),
    #[error("plant integration failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("optimal control problem infeasible at t = {t} (step {k})")]
    Infeasible {
        k: usize,
        t: f64,
        log: Box<ClosedLoopLog>,
    },
}

/// Terminal speed band used in velocity-assigned mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub band: f64,
    pub k_v: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { band: 0.2, k_v: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpfcConfig {
    pub delta: f64,
    pub horizon: f64,
    pub intervals: usize,
    /// Integration substep of both the OCP and the plant.
    pub substep: f64,
    pub t_end: f64,
    pub mode: Mode,
    pub weights: CostWeights,
    pub constraints: ConstraintSet,
    pub solver: SolverOptions,
    pub end_penalty: EndPenalty,
    pub band: BandConfig,
}

impl Default for MpfcConfig {
    fn default() -> Self {
        Self {
            delta: 0.005,
            horizon: 0.75,
            intervals: 20,
            substep: 0.0025,
            t_end: 15.0,
            mode: Mode::PathFollowing,
            weights: CostWeights::default(),
            constraints: ConstraintSet::default(),
            solver: SolverOptions::default(),
            end_penalty: EndPenalty::Zero,
            band: BandConfig::default(),
        }
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let r = a / b;
    r.round() >= 1.0 && (r - r.round()).abs() <= 1e-9 * r.max(1.0)
}

impl MpfcConfig {
    pub fn validate(&self) -> Result<(), MpfcError> {
        let bad = |m: &str| Err(MpfcError::Config(m.to_string()));
        if !(self.delta > 0.0 && self.delta < self.horizon) {
            return bad("need 0 < delta < horizon");
        }
        if !(self.t_end > 0.0) || !is_multiple(self.t_end, self.delta) {
            return bad("t_end must be a positive multiple of delta");
        }
        if !is_multiple(self.delta, self.substep) {
            return bad("delta must be a multiple of the integration substep");
        }
        if self.delta >= self.horizon / self.intervals as f64 {
            return bad("delta must be shorter than one shooting interval");
        }
        self.constraints
            .validate()
            .map_err(|e| MpfcError::Config(e.to_string()))?;
        if self.mode.is_velocity() != (self.constraints.z_set == PathParamConstraint::Free) {
            return bad("velocity-assigned mode runs with an unconstrained path parameter and vice versa");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.delta).round() as usize
    }

    /// Velocity-assigned variant of the default configuration: unconstrained
    /// path parameter and [`SPEED_ERROR_WEIGHT`] on the speed error.
    pub fn velocity_assigned(thetadot_ref: f64) -> Self {
        let mut cfg = Self {
            mode: Mode::VelocityAssigned { thetadot_ref },
            ..Self::default()
        };
        cfg.constraints.z_set = PathParamConstraint::Free;
        cfg.weights.q_diag[4] = SPEED_ERROR_WEIGHT;
        cfg
    }
}

/// Fixed ingredients of a closed-loop run.
#[derive(Debug, Clone)]
pub struct LoopContext {
    pub params: RobotParams,
    pub path: PathSpec,
    pub terminal: TerminalSet,
    pub band: Option<VelocityBand>,
    pub cfg: MpfcConfig,
}

impl LoopContext {
    pub fn new(
        params: RobotParams,
        path: PathSpec,
        terminal: TerminalSet,
        cfg: MpfcConfig,
    ) -> Result<Self, MpfcError> {
        cfg.validate()?;
        let band = match cfg.mode {
            Mode::VelocityAssigned { thetadot_ref } => Some(terminal.velocity_band(
                &path,
                thetadot_ref,
                cfg.band.band,
                cfg.band.k_v,
            )?),
            Mode::PathFollowing => None,
        };
        Ok(Self {
            params,
            path,
            terminal,
            band,
            cfg,
        })
    }

    pub fn problem(&self, x0: AugmentedState, t0: f64) -> OcpProblem {
        let c = &self.cfg;
        OcpProblem {
            params: self.params,
            path: self.path,
            constraints: c.constraints,
            terminal: self.terminal.clone(),
            band: self.band,
            weights: c.weights,
            mode: c.mode,
            horizon: c.horizon,
            intervals: c.intervals,
            substep: c.substep,
            x0,
            t0,
            end_penalty: c.end_penalty,
            options: c.solver,
        }
    }
}

/// Path parameter closest to the joint position, searched on a dense grid
/// and refined by golden-section search. Ties go to the smallest theta.
pub fn init_theta(q: &Vector2<f64>, path: &PathSpec) -> PathParamState {
    let (a, b) = (path.theta0, path.theta1);
    let dist = |th: f64| (q - path.value(th)).norm_squared();
    let h = (b - a) / (INIT_GRID - 1) as f64;
    let grid: Vec<f64> = (0..INIT_GRID).map(|j| dist(a + j as f64 * h)).collect();
    let mut best = (f64::INFINITY, a);
    for j in 0..INIT_GRID {
        let left = if j > 0 { grid[j - 1] } else { f64::INFINITY };
        let right = if j + 1 < INIT_GRID { grid[j + 1] } else { f64::INFINITY };
        if grid[j] > left || grid[j] > right {
            continue;
        }
        let lo = (a + (j as f64 - 1.0) * h).max(a);
        let hi = (a + (j as f64 + 1.0) * h).min(b);
        let th = golden_section(&dist, lo, hi);
        let (d, th) = if dist(th) <= grid[j] {
            (dist(th), th)
        } else {
            (grid[j], a + j as f64 * h)
        };
        // Local minima are visited in increasing theta, so only a strict
        // improvement replaces the incumbent.
        if best.0.is_infinite() || d < best.0 - 1e-12 * (1.0 + best.0) {
            best = (d, th);
        }
    }
    PathParamState::new(best.1, 0.0)
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// One log line per sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub q: [f64; 2],
    pub qdot: [f64; 2],
    pub theta: f64,
    pub thetadot: f64,
    pub u: [f64; 2],
    pub v: f64,
    pub e: [f64; 2],
    pub e_norm: f64,
    pub cart: [f64; 2],
    /// F at t_k with the applied inputs.
    pub stage_cost: f64,
    /// Integral of F over [t_k, t_k + delta] along the plant.
    pub interval_cost: f64,
    /// Optimal value including the configured end penalty.
    pub ocp_cost: f64,
    /// Optimal value without end penalty.
    pub ocp_stage_cost: f64,
    pub status: SolveStatus,
    pub terminal_margin: f64,
    pub iterations: usize,
    pub kkt: f64,
    /// Largest |u_i| / u_max applied over the step.
    pub u_ratio: f64,
    /// Largest |qdot_i| / qdot_max at the plant substeps of the step.
    pub qdot_ratio: f64,
    pub solve_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub records: Vec<StepRecord>,
    pub final_state: Option<([f64; 4], [f64; 2])>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub steps: usize,
    pub final_e_norm: f64,
    pub final_theta: f64,
    pub final_thetadot: f64,
    pub u_violations: usize,
    pub qdot_violations: usize,
    pub backward_steps: usize,
    pub infeasible: usize,
    pub not_converged: usize,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    /// Share of steps with V(t_{k+1}) - V(t_k) <= -int F + 1e-3.
    pub descent_fraction: f64,
    pub max_descent_residual: f64,
}

pub const DESCENT_SLACK: f64 = 1e-3;

impl ClosedLoopLog {
    /// V(t_{k+1}) - V(t_k) + int_{t_k}^{t_{k+1}} F dt for every step.
    pub fn descent_residuals(&self) -> Vec<f64> {
        self.records
            .windows(2)
            .map(|w| w[1].ocp_cost - w[0].ocp_cost + w[0].interval_cost)
            .collect()
    }

    /// Final error norm reached and kept from some time onwards.
    pub fn settled_after(&self, f: impl Fn(&StepRecord) -> bool) -> Option<f64> {
        let mut t = None;
        for r in self.records.iter().rev() {
            if !f(r) {
                break;
            }
            t = Some(r.t);
        }
        t
    }

    pub fn summary(&self) -> LogSummary {
        let r = &self.records;
        let last = r.last();
        let res = self.descent_residuals();
        let ok = res.iter().filter(|&&d| d <= DESCENT_SLACK).count();
        let times: Vec<f64> = r.iter().map(|x| x.solve_time).collect();
        LogSummary {
            steps: r.len(),
            final_e_norm: last.map_or(f64::NAN, |x| x.e_norm),
            final_theta: last.map_or(f64::NAN, |x| x.theta),
            final_thetadot: last.map_or(f64::NAN, |x| x.thetadot),
            u_violations: r.iter().filter(|x| x.u_ratio > 1.0).count(),
            qdot_violations: r.iter().filter(|x| x.qdot_ratio > 1.0).count(),
            backward_steps: r.iter().filter(|x| x.thetadot < -1e-9).count(),
            infeasible: r.iter().filter(|x| x.status == SolveStatus::Infeasible).count(),
            not_converged: r.iter().filter(|x| x.status != SolveStatus::Converged).count(),
            mean_solve_time: times.iter().sum::<f64>() / times.len().max(1) as f64,
            max_solve_time: times.iter().cloned().fold(0.0, f64::max),
            descent_fraction: if res.is_empty() {
                1.0
            } else {
                ok as f64 / res.len() as f64
            },
            max_descent_residual: res.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub struct StepOutput {
    pub u: Vector2<f64>,
    pub v: f64,
    pub x_next: RobotState,
    pub z_next: PathParamState,
    pub solution: OcpSolution,
    pub record: StepRecord,
}

/// Holds `u` for `duration` on the plant; returns the end state, the largest
/// joint-velocity ratio seen and the integral of F.
fn propagate_plant(
    ctx: &LoopContext,
    x: &RobotState,
    z: &PathParamState,
    u: &Vector2<f64>,
    v: f64,
) -> Result<(RobotState, f64, f64), DynamicsError> {
    let cfg = &ctx.cfg;
    let n = (cfg.delta / cfg.substep).round() as usize;
    let h = cfg.delta / n as f64;
    let qd_max = cfg.constraints.qdot_max;
    let mut s = Vector4::new(x.q[0], x.q[1], x.qdot[0], x.qdot[1]);
    let mut f = |y: &Vector4<f64>| {
        let st = RobotState::new(y[0], y[1], y[2], y[3]);
        let d = robot_rhs(&st, u, &ctx.params)?;
        Ok(Vector4::new(d.q[0], d.q[1], d.qdot[0], d.qdot[1]))
    };
    let cost = |s: &Vector4<f64>, zz: &PathParamState| {
        let st = AugmentedState::new(RobotState::new(s[0], s[1], s[2], s[3]), *zz);
        stage_cost_at(&st, u, v, &cfg.weights, &cfg.mode, &ctx.path)
    };
    let mut integral = 0.5 * h * cost(&s, z);
    let mut ratio = s[2].abs().max(s[3].abs()) / qd_max;
    for j in 1..=n {
        s = rk4_step(&mut f, &s, h)?;
        let zj = z.advance(v, j as f64 * h);
        let w = if j == n { 0.5 * h } else { h };
        integral += w * cost(&s, &zj);
        ratio = ratio.max(s[2].abs().max(s[3].abs()) / qd_max);
    }
    Ok((RobotState::new(s[0], s[1], s[2], s[3]), ratio, integral))
}

pub fn step(
    k: usize,
    x: &RobotState,
    z: &PathParamState,
    ctx: &LoopContext,
    prev: Option<&OcpSolution>,
) -> Result<StepOutput, MpfcError> {
    let cfg = &ctx.cfg;
    let t = k as f64 * cfg.delta;
    let s0 = AugmentedState::new(*x, *z);
    let problem = ctx.problem(s0, t);
    let warm = match prev {
        Some(p) => Some(shift_warm_start(&problem, p, cfg.delta)?),
        None => None,
    };
    let clock = Instant::now();
    let sol = solve(&problem, warm.as_ref())?;
    let solve_time = clock.elapsed().as_secs_f64();
    let u = sol.u[0];
    let v = sol.v[0];
    let (x_next, qdot_ratio, interval_cost) = propagate_plant(ctx, x, z, &u, v)?;
    let z_next = z.advance(v, cfg.delta);
    let p = ctx.path.value(z.theta);
    let e = x.q - p;
    let record = StepRecord {
        k,
        t,
        q: [x.q[0], x.q[1]],
        qdot: [x.qdot[0], x.qdot[1]],
        theta: z.theta,
        thetadot: z.thetadot,
        u: [u[0], u[1]],
        v,
        e: [e[0], e[1]],
        e_norm: e.norm(),
        cart: {
            let c = ctx.params.cartesian_output(&x.q);
            [c[0], c[1]]
        },
        stage_cost: stage_cost_at(&s0, &u, v, &cfg.weights, &cfg.mode, &ctx.path),
        interval_cost,
        ocp_cost: sol.cost,
        ocp_stage_cost: sol.stage_cost,
        status: sol.status,
        terminal_margin: sol.terminal_margin,
        iterations: sol.iterations,
        kkt: sol.kkt,
        u_ratio: u.amax() / cfg.constraints.u_max,
        qdot_ratio,
        solve_time,
    };
    Ok(StepOutput {
        u,
        v,
        x_next,
        z_next,
        solution: sol,
        record,
    })
}

/// Runs the loop from `x0`; the path-parameter state starts at `z0` or, if
/// absent, at the closest path point with zero speed.
pub fn run(
    x0: &RobotState,
    z0: Option<PathParamState>,
    ctx: &LoopContext,
) -> Result<ClosedLoopLog, MpfcError> {
    run_with(x0, z0, ctx, |_| {})
}

/// As [`run`], calling `on_step` after every sampling instant.
pub fn run_with(
    x0: &RobotState,
    z0: Option<PathParamState>,
    ctx: &LoopContext,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<ClosedLoopLog, MpfcError> {
    let mut x = *x0;
    let mut z = z0.unwrap_or_else(|| init_theta(&x0.q, &ctx.path));
    let mut log = ClosedLoopLog::default();
    let mut prev: Option<OcpSolution> = None;
    for k in 0..ctx.cfg.steps() {
        let out = step(k, &x, &z, ctx, prev.as_ref())?;
        on_step(&out.record);
        let infeasible = out.record.status == SolveStatus::Infeasible;
        let t = out.record.t;
        log.records.push(out.record);
        if infeasible {
            log.final_state = Some(([x.q[0], x.q[1], x.qdot[0], x.qdot[1]], [z.theta, z.thetadot]));
            return Err(MpfcError::Infeasible {
                k,
                t,
                log: Box::new(log),
            });
        }
        x = out.x_next;
        z = out.z_next;
        prev = Some(out.solution);
    }
    log.final_state = Some(([x.q[0], x.q[1], x.qdot[0], x.qdot[1]], [z.theta, z.thetadot]));
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal_set::{synthesize, SynthesisConfig};

    fn context(cfg: MpfcConfig) -> LoopContext {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        LoopContext::new(RobotParams::default(), PathSpec::default(), ts, cfg).unwrap()
    }

    #[test]
    fn init_theta_finds_path_point() {
        let path = PathSpec::default();
        let z = init_theta(&path.value(-2.0), &path);
        assert!((z.theta + 2.0).abs() < 1e-6, "{}", z.theta);
        assert_eq!(z.thetadot, 0.0);
    }

    #[test]
    fn init_theta_start_is_near_path_start() {
        let path = PathSpec::default();
        let q = Vector2::new(-5.86, 2.43);
        let z = init_theta(&q, &path);
        // The closest point is about 0.3 inside the path start.
        assert!((z.theta + 5.3).abs() < 0.35, "{}", z.theta);
        let d = |th: f64| (q - path.value(th)).norm();
        let best = (0..1_000_001)
            .map(|j| d(-5.3 + 5.3 * j as f64 / 1e6))
            .fold(f64::INFINITY, f64::min);
        assert!(d(z.theta) <= best + 1e-12);
    }

    #[test]
    fn init_theta_breaks_ties_low() {
        // The second path coordinate is symmetric about its trough at
        // s = -pi / 1.2, so a point on that vertical line has two mirrored
        // closest points.
        let path = PathSpec::default();
        let s_trough = -std::f64::consts::PI / 1.2;
        let theta_trough = s_trough + std::f64::consts::PI / 3.0;
        let q = Vector2::new(s_trough, -4.0);
        let z = init_theta(&q, &path);
        assert!(z.theta < theta_trough - 0.1, "{}", z.theta);
        let mirrored = 2.0 * theta_trough - z.theta;
        let d = |th: f64| (q - path.value(th)).norm();
        assert!((d(z.theta) - d(mirrored)).abs() < 1e-9);
        // Brute-force grid oracle for the minimum distance.
        let best = (0..1_000_001)
            .map(|j| d(-5.3 + 5.3 * j as f64 / 1e6))
            .fold(f64::INFINITY, f64::min);
        assert!(d(z.theta) <= best + 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MpfcConfig::default();
        cfg.delta = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MpfcConfig::default();
        cfg.t_end = 0.0123;
        assert!(cfg.validate().is_err());
        let mut cfg = MpfcConfig::default();
        cfg.mode = Mode::VelocityAssigned { thetadot_ref: 0.2 };
        assert!(cfg.validate().is_err());
        cfg.constraints.z_set = PathParamConstraint::Free;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn path_end_start_stays_put() {
        let cfg = MpfcConfig {
            t_end: 0.25,
            ..MpfcConfig::default()
        };
        let ctx = context(cfg);
        let path = PathSpec::default();
        let q = path.value(0.0);
        let log = run(
            &RobotState {
                q,
                qdot: Vector2::zeros(),
            },
            Some(PathParamState::new(0.0, 0.0)),
            &ctx,
        )
        .unwrap();
        assert_eq!(log.records.len(), 50);
        for r in &log.records {
            assert!(r.e_norm < 1e-6, "{}", r.e_norm);
            assert!(r.theta.abs() < 1e-9 && r.thetadot.abs() < 1e-9);
            assert!((r.u[0] - ctx.cfg.weights.u_tilde[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn z_carry_is_closed_form() {
        let z = PathParamState::new(-1.0, 0.1);
        let n = z.advance(3.0, 0.005);
        assert!((n.theta - (-1.0 + 0.1 * 0.005 + 3.0 * 0.005 * 0.005 / 2.0)).abs() < 1e-15);
        assert!((n.thetadot - (0.1 + 3.0 * 0.005)).abs() < 1e-15);
    }

    #[test]
    fn short_run_is_deterministic_and_feasible() {
        let cfg = MpfcConfig {
            t_end: 0.1,
            ..MpfcConfig::default()
        };
        let ctx = context(cfg);
        let x0 = RobotState::new(-5.86, 2.43, 0.0, 0.0);
        let z0 = Some(PathParamState::new(-5.3, 0.0));
        let a = run(&x0, z0, &ctx).unwrap();
        let b = run(&x0, z0, &ctx).unwrap();
        assert_eq!(a.records.len(), 20);
        assert_eq!(a.records[0].status, SolveStatus::Converged);
        let strip = |l: &ClosedLoopLog| {
            l.records
                .iter()
                .map(|r| StepRecord {
                    solve_time: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let s = a.summary();
        assert_eq!(s.u_violations + s.qdot_violations + s.infeasible, 0);
        for w in a.records.windows(2) {
            assert!(w[1].t > w[0].t);
        }
    }
}
