//! Numerical self-checks shared by the command line and the test suites:
//! CARE residual, coordinate round trip, vector-field consistency,
//! integrator order, bound audit and the end-penalty equivalence.

use crate::dynamics::{
    augmented_rhs, integrate, robot_rhs, AugmentedState, DynamicsError, PathParamState, PathSpec,
    RobotParams, RobotState,
};
use crate::mpfc::LoopContext;
use crate::ocp::{solve, EndPenalty, ProblemError, SolveStatus};
use crate::terminal_set::bounds::{grid_maxima, GridMaxima, ModelBounds};
use crate::terminal_set::{care_residual, SynthesisConfig, TerminalSet};
use crate::transverse::{from_transverse, to_transverse, transverse_rhs};
use nalgebra::{Matrix2, Matrix4, Vector2, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub fn care_check(ts: &TerminalSet, cfg: &SynthesisConfig) -> f64 {
    let q = Matrix4::from_diagonal(&Vector4::from(cfg.q_xi_diag));
    let r = Matrix2::from_diagonal(&Vector2::from(cfg.r_xi_diag));
    care_residual(&ts.p_xi, &q, &r)
}

fn random_state(rng: &mut ChaCha8Rng, path: &PathSpec, qdot_max: f64) -> AugmentedState {
    AugmentedState::new(
        RobotState::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-qdot_max..qdot_max),
            rng.random_range(-qdot_max..qdot_max),
        ),
        PathParamState::new(
            rng.random_range(path.theta0..path.theta1),
            rng.random_range(-1.0..1.0),
        ),
    )
}

/// Largest |Phi^-1(Phi(s)) - s| over `n` random augmented states.
pub fn phi_round_trip(path: &PathSpec, qdot_max: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = random_state(&mut rng, path, qdot_max);
            let back = from_transverse(&to_transverse(&s, path), path);
            (back.to_vector() - s.to_vector()).amax()
        })
        .fold(0.0, f64::max)
}

/// Largest relative mismatch between the transverse vector field and the
/// chain-rule image of the augmented vector field over `n` random points.
pub fn vector_field_consistency(
    params: &RobotParams,
    path: &PathSpec,
    qdot_max: f64,
    u_max: f64,
    n: usize,
    seed: u64,
) -> Result<f64, DynamicsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let s = random_state(&mut rng, path, qdot_max);
        let u = Vector2::new(rng.random_range(-u_max..u_max), rng.random_range(-u_max..u_max));
        let v = rng.random_range(-50.0..50.0);
        let f = augmented_rhs(&s, &u, v, params, path)?;
        let (_, dp, ddp) = path.jet(s.z.theta);
        let td = s.z.thetadot;
        // d/dt of xi1 = q - p(theta) and xi2 = qdot - p'(theta) thetadot
        let expect = Vector6::new(
            f.x.q[0] - dp[0] * td,
            f.x.q[1] - dp[1] * td,
            f.x.qdot[0] - ddp[0] * td * td - dp[0] * v,
            f.x.qdot[1] - ddp[1] * td * td - dp[1] * v,
            td,
            v,
        );
        let got = transverse_rhs(&to_transverse(&s, path), &u, v, params, path)?.to_vector();
        worst = worst.max((got - expect).amax() / expect.amax().max(1.0));
    }
    Ok(worst)
}

/// Observed order of the fixed-step integrator from three step sizes on a
/// swinging-arm problem.
pub fn integrator_order(params: &RobotParams, h: f64) -> Result<f64, DynamicsError> {
    let x0 = RobotState::new(-1.0, 0.8, 0.5, -0.3);
    let end = |h: f64| -> Result<Vector4<f64>, DynamicsError> {
        let f = |t: f64, x: &Vector4<f64>| {
            let s = RobotState::new(x[0], x[1], x[2], x[3]);
            let u = Vector2::new(200.0 * t.sin(), -100.0 * (2.0 * t).cos());
            let d = robot_rhs(&s, &u, params)?;
            Ok(Vector4::new(d.q[0], d.q[1], d.qdot[0], d.qdot[1]))
        };
        let v = Vector4::new(x0.q[0], x0.q[1], x0.qdot[0], x0.qdot[1]);
        Ok(*integrate(f, v, 0.0, 1.0, h)?.last())
    };
    let (a, b, c) = (end(h)?, end(h / 2.0)?, end(h / 4.0)?);
    Ok(((a - b).norm() / (b - c).norm()).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    pub bounds: ModelBounds,
    pub grid: GridMaxima,
    pub ok: bool,
}

/// Compares the synthesis bounds with maxima sampled on a grid of `n` points.
pub fn audit_bounds(ts: &TerminalSet, cfg: &SynthesisConfig, n: usize) -> BoundAudit {
    let grid = grid_maxima(
        &cfg.params,
        &cfg.path,
        &ts.eta_poly,
        &ts.eta_gain,
        cfg.constraints.qdot_max,
        n,
    );
    let b = ts.bounds;
    // The B, C and g bounds are attained, so allow rounding.
    let tie = 1.0 + 1e-12;
    let ok = grid.b <= b.b_bar * tie
        && grid.c <= b.c_bar * tie
        && grid.g <= b.g_bar * tie
        && grid.pdot <= b.pdot_bar
        && grid.pddot <= b.pddot_bar;
    BoundAudit {
        bounds: b,
        grid,
        ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndPenaltyReport {
    /// sup-norm difference of the optimal inputs (u in N m, v in 1/s^2).
    pub control_diff: f64,
    pub cost_diff: f64,
    /// Penalty value at the end of the horizon.
    pub penalty: f64,
    pub both_converged: bool,
}

impl EndPenaltyReport {
    pub fn passed(&self, control_tol: f64, cost_tol: f64) -> bool {
        self.both_converged
            && self.control_diff < control_tol
            && (self.cost_diff - self.penalty).abs() <= cost_tol
    }
}

/// Solves the OCP at (x0, t0) with no end penalty and with the exponential
/// penalty c_bar / alpha exp(-alpha t); the penalty does not depend on the
/// decision variables, so only the optimal value may move.
pub fn end_penalty_equivalence(
    ctx: &LoopContext,
    x0: AugmentedState,
    t0: f64,
    c_bar: f64,
    alpha: f64,
) -> Result<EndPenaltyReport, ProblemError> {
    let mut p = ctx.problem(x0, t0);
    p.end_penalty = EndPenalty::Zero;
    let a = solve(&p, None)?;
    p.end_penalty = EndPenalty::Exponential {
        c_bar,
        alpha,
        t_origin: 0.0,
    };
    let b = solve(&p, None)?;
    let du = a
        .u
        .iter()
        .zip(&b.u)
        .map(|(x, y)| (x - y).amax())
        .chain(a.v.iter().zip(&b.v).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(EndPenaltyReport {
        control_diff: du,
        cost_diff: b.cost - a.cost,
        penalty: p.end_penalty.value(t0 + p.horizon),
        both_converged: a.status == SolveStatus::Converged && b.status == SolveStatus::Converged,
    })
}
