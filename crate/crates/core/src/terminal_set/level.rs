//! Largest ellipsoid level compatible with the input and velocity bounds of
//! the terminal controller.

use super::bounds::ModelBounds;
use super::care::spectral_norm;
use super::SynthesisError;
use crate::dynamics::ConstraintSet;
use crate::transverse::XiGain;
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

pub const BISECTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub gamma: f64,
    /// Radius of the xi ball the input bound allows.
    pub xi_radius: f64,
    /// Radius of the xi2 ball the velocity bound allows.
    pub xi2_radius: f64,
    pub bisection_steps: usize,
}

impl LevelResult {
    pub fn level(&self) -> f64 {
        self.gamma * self.gamma
    }
}

/// Radii of the two norm balls the ellipsoid has to fit in.
pub fn admissible_radii(
    gains: &XiGain,
    bounds: &ModelBounds,
    constraints: &ConstraintSet,
) -> Result<(f64, f64), SynthesisError> {
    let k_norm = spectral_norm(&gains.k_xi);
    let numer = constraints.u_max
        - bounds.c_bar * constraints.qdot_max
        - bounds.g_bar
        - bounds.b_bar * bounds.pddot_bar;
    if !(numer > 0.0) {
        return Err(SynthesisError::InsufficientInputAuthority {
            u_max: constraints.u_max,
            required: constraints.u_max - numer,
        });
    }
    let r_q = constraints.qdot_max - bounds.pdot_bar;
    if !(r_q > 0.0) {
        return Err(SynthesisError::InsufficientVelocityMargin {
            qdot_max: constraints.qdot_max,
            pdot_bar: bounds.pdot_bar,
        });
    }
    Ok((numer / (bounds.b_bar * k_norm), r_q))
}

pub fn maximize_level(
    gains: &XiGain,
    bounds: &ModelBounds,
    constraints: &ConstraintSet,
) -> Result<LevelResult, SynthesisError> {
    let (r_u, r_q) = admissible_radii(gains, bounds, constraints)?;
    let p_inv = gains
        .p_xi
        .try_inverse()
        .ok_or(SynthesisError::RiccatiDiverged)?;
    // On {xi' P xi <= g^2}: max ||xi|| = g sqrt(lmax(P^-1)) and
    // max ||xi2|| = g sqrt(lmax((P^-1)_22)), the shadow on the xi2 coordinates.
    let lam_all = p_inv.symmetric_eigenvalues().max();
    let shadow: Matrix2<f64> = p_inv.fixed_view::<2, 2>(2, 2).into_owned();
    let lam_22 = shadow.symmetric_eigenvalues().max();
    let fits = |g: f64| g * g * lam_all <= r_u * r_u && g * g * lam_22 <= r_q * r_q;

    let mut lo = 0.0;
    let mut hi = 1.0;
    while fits(hi) {
        lo = hi;
        hi *= 2.0;
    }
    let mut steps = 0;
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        steps += 1;
    }
    Ok(LevelResult {
        gamma: lo,
        xi_radius: r_u,
        xi2_radius: r_q,
        bisection_steps: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PathSpec, RobotParams};
    use crate::terminal_set::bounds::{compute_bounds, BoundOptions};
    use crate::terminal_set::build_eta_polytope;
    use crate::terminal_set::care::solve_care;
    use crate::transverse::EtaGain;
    use nalgebra::{Matrix4, Vector4};
    use rand::{Rng, SeedableRng};

    fn default_bounds() -> (XiGain, ModelBounds, ConstraintSet) {
        let gain = EtaGain::default();
        let poly = build_eta_polytope(&gain, -5.3, 0.4).unwrap();
        let cons = ConstraintSet::default();
        let b = compute_bounds(
            &RobotParams::default(),
            &PathSpec::default(),
            &poly,
            &gain,
            &cons,
            &BoundOptions::default(),
        )
        .unwrap();
        let g = solve_care(&Matrix4::identity(), &Matrix2::identity()).unwrap();
        (g, b, cons)
    }

    #[test]
    fn default_level_is_near_three() {
        let (g, b, c) = default_bounds();
        let lv = maximize_level(&g, &b, &c).unwrap();
        assert!((lv.level() - 3.13).abs() <= 0.313, "level {}", lv.level());
    }

    #[test]
    fn matches_closed_form_radius() {
        let (g, b, c) = default_bounds();
        let lv = maximize_level(&g, &b, &c).unwrap();
        // lmin(P) = sqrt3 - 1, lmax((P^-1)_22) = sqrt3 / 2.
        let s3 = 3f64.sqrt();
        let direct = (lv.xi_radius * (s3 - 1.0).sqrt()).min(lv.xi2_radius / (s3 / 2.0).sqrt());
        assert!((lv.gamma - direct).abs() <= BISECTION_TOL);
    }

    #[test]
    fn boundary_samples_respect_both_balls() {
        let (g, b, c) = default_bounds();
        let lv = maximize_level(&g, &b, &c).unwrap();
        let l = g.p_xi.cholesky().unwrap().l();
        let l_inv_t = l.try_inverse().unwrap().transpose();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let y = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if y.norm() < 1e-3 {
                continue;
            }
            let xi: Vector4<f64> = l_inv_t * (y / y.norm()) * lv.gamma;
            assert!((xi.dot(&(g.p_xi * xi)) - lv.level()).abs() < 1e-9);
            assert!(xi.norm() <= lv.xi_radius * (1.0 + 1e-9));
            assert!(xi.fixed_rows::<2>(2).norm() <= lv.xi2_radius * (1.0 + 1e-9));
        }
    }

    #[test]
    fn weak_actuators_are_rejected() {
        let (g, b, c) = default_bounds();
        let weak = ConstraintSet { u_max: 100.0, ..c };
        let err = maximize_level(&g, &b, &weak).unwrap_err();
        assert!(matches!(err, SynthesisError::InsufficientInputAuthority { .. }));
        assert!(err.to_string().contains("insufficient input authority"));
    }
}
