//! Quadratic stage cost F.

use crate::dynamics::{AugmentedState, PathSpec};
use crate::transverse::to_transverse;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// What the fifth state weight penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// theta - theta1: converge to the path end.
    PathFollowing,
    /// thetadot - thetadot_ref: move along the path at an assigned speed.
    VelocityAssigned { thetadot_ref: f64 },
}

impl Mode {
    pub fn is_velocity(&self) -> bool {
        matches!(self, Mode::VelocityAssigned { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Diagonal weight on (e1, e2, edot1, edot2, theta or speed error).
    pub q_diag: [f64; 5],
    /// Diagonal weight on (u1 - u_tilde1, u2 - u_tilde2, v).
    pub r_diag: [f64; 3],
    pub u_tilde: [f64; 2],
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            q_diag: [1e5, 1e5, 10.0, 10.0, 5.0],
            r_diag: [1e-3, 1e-3, 1e-4],
            // g(p(0)) for the default robot and path
            u_tilde: [229.50071262866257, -162.89928737133752],
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self
            .q_diag
            .iter()
            .chain(self.r_diag.iter())
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err("cost weights must be finite and non-negative".into());
        }
        if !(self.q_diag[0] > 0.0 && self.q_diag[1] > 0.0 && self.q_diag[4] > 0.0) {
            return Err("the e and theta weights must be positive".into());
        }
        if !self.u_tilde.iter().all(|u| u.is_finite()) {
            return Err("u_tilde must be finite".into());
        }
        Ok(())
    }

    pub fn u_tilde(&self) -> Vector2<f64> {
        Vector2::from(self.u_tilde)
    }
}

/// F(e, edot, w, u, v) where w is theta - theta1 or thetadot - thetadot_ref.
pub fn stage_cost(
    e: &Vector2<f64>,
    edot: &Vector2<f64>,
    w: f64,
    u: &Vector2<f64>,
    v: f64,
    weights: &CostWeights,
) -> f64 {
    let q = &weights.q_diag;
    let r = &weights.r_diag;
    let du = u - weights.u_tilde();
    q[0] * e[0] * e[0]
        + q[1] * e[1] * e[1]
        + q[2] * edot[0] * edot[0]
        + q[3] * edot[1] * edot[1]
        + q[4] * w * w
        + r[0] * du[0] * du[0]
        + r[1] * du[1] * du[1]
        + r[2] * v * v
}

/// The fifth cost argument for a given mode.
#[inline]
pub fn mode_term(s: &AugmentedState, mode: &Mode, path: &PathSpec) -> f64 {
    match mode {
        Mode::PathFollowing => s.z.theta - path.theta1,
        Mode::VelocityAssigned { thetadot_ref } => s.z.thetadot - thetadot_ref,
    }
}

pub fn stage_cost_at(
    s: &AugmentedState,
    u: &Vector2<f64>,
    v: f64,
    weights: &CostWeights,
    mode: &Mode,
    path: &PathSpec,
) -> f64 {
    let c = to_transverse(s, path);
    stage_cost(&c.xi1, &c.xi2, mode_term(s, mode, path), u, v, weights)
}
