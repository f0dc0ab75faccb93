//! Warm start for the next sampling instant: the previous optimal inputs
//! shifted by one sampling period, followed by the terminal controller.

use super::problem::{transcribe, OcpProblem, ProblemError, CTRL, STATE};
use super::solver::{OcpSolution, WarmStart};
use crate::dynamics::{augmented_rhs_vec, rk4_step, AugmentedState, DynamicsError};
use nalgebra::Vector6;

/// Scaled terminal controls at `s`, clipped to the input box.
pub fn tail_controls(problem: &OcpProblem, s: &AugmentedState) -> [f64; 3] {
    let (u, v) = problem.terminal_controls(s);
    let c = problem.scale_controls(&u, v);
    let vs = problem.v_scale();
    [
        c[0].clamp(-1.0, 1.0),
        c[1].clamp(-1.0, 1.0),
        c[2].clamp(problem.constraints.v_min / vs, problem.constraints.v_max / vs),
    ]
}

/// Integrates the closed loop under the terminal controller for `duration`.
pub fn terminal_flow(
    problem: &OcpProblem,
    s: &AugmentedState,
    duration: f64,
) -> Result<AugmentedState, DynamicsError> {
    let n = crate::dynamics::substep_count(duration, problem.substep);
    let h = duration / n.max(1) as f64;
    let mut x = s.to_vector();
    let mut f = |y: &Vector6<f64>| {
        let st = AugmentedState::from_vector(y);
        let (u, v) = problem.terminal_controls(&st);
        augmented_rhs_vec(y, &u, v, &problem.params)
    };
    for _ in 0..n {
        x = rk4_step(&mut f, &x, h)?;
    }
    Ok(AugmentedState::from_vector(&x))
}

/// Warm start for `problem` (whose initial state is the state reached after
/// applying `prev` for `delta`).
///
/// Interval `i` of the new horizon starts `delta` later than interval `i` of
/// the old one, so its control is the time-weighted mix of old controls `i`
/// and `i+1`; the last interval mixes in the terminal controls at the old
/// terminal node. Nodes are read off the old predicted trajectory, and the
/// last node follows the terminal closed loop from the old terminal node.
pub fn shift_warm_start(
    problem: &OcpProblem,
    prev: &OcpSolution,
    delta: f64,
) -> Result<WarmStart, ProblemError> {
    let nlp = transcribe(problem)?;
    let n_int = problem.intervals;
    let dt = nlp.dt;
    let m = delta / nlp.h;
    if !(delta > 0.0 && delta < dt) || (m - m.round()).abs() > 1e-9 {
        return Err(ProblemError::Invalid(
            "shift must be a positive multiple of the substep shorter than one interval".into(),
        ));
    }
    let m = m.round() as usize;
    if prev.x.len() != nlp.n || prev.dense.len() != n_int * nlp.n_sub + 1 {
        return Err(ProblemError::Invalid("previous solution has the wrong dimension".into()));
    }
    let old_ctrl = |i: usize| -> [f64; 3] {
        let ci = nlp.ctrl_index(i);
        [prev.x[ci], prev.x[ci + 1], prev.x[ci + 2]]
    };
    let old_end = *prev.terminal_state();
    let tail = tail_controls(problem, &old_end);
    let w = delta / dt;
    let mut x = vec![0.0; nlp.n];
    for i in 0..n_int {
        let a = old_ctrl(i);
        let b = if i + 1 < n_int { old_ctrl(i + 1) } else { tail };
        let ci = nlp.ctrl_index(i);
        for k in 0..CTRL {
            x[ci + k] = (1.0 - w) * a[k] + w * b[k];
        }
    }
    for i in 1..n_int {
        let ni = nlp.node_index(i);
        x[ni..ni + STATE].copy_from_slice(prev.dense[i * nlp.n_sub + m].as_slice());
    }
    let end = terminal_flow(problem, &old_end, delta)
        .map(|s| s.to_vector())
        .unwrap_or_else(|_| old_end.to_vector());
    let ni = nlp.node_index(n_int);
    x[ni..ni + STATE].copy_from_slice(end.as_slice());
    nlp.project(&mut x);
    Ok(WarmStart {
        x,
        lambda_eq: prev.lambda_eq.clone(),
        lambda_in: prev.lambda_in.clone(),
        mu: prev.mu,
    })
}
