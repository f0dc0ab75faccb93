//! Terminal region E = {(x, z) : xi' P xi <= gamma^2, eta in E_eta} and its
//! synthesis: model bounds, Riccati gain, eta polytope and level maximization.

pub mod artifact;
pub mod bounds;
pub mod care;
pub mod level;
pub mod verify;

use crate::dynamics::{AugmentedState, ConstraintSet, InvalidParameter, PathSpec, RobotParams};
use crate::transverse::{to_transverse, EtaGain, XiGain};
use bounds::{compute_bounds, path_derivative_maxima, BoundOptions, ModelBounds};
use level::{maximize_level, LevelResult};
use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifact::{Artifact, ARTIFACT_VERSION};
pub use care::{care_residual, solve_care};
pub use verify::{verify_invariance, InvarianceOptions, InvarianceReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    InvalidParameter(#[from] InvalidParameter),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("eta closed loop has complex eigenvalues (k2^2 <= -4 k1)")]
    ComplexEtaEigenvalues,
    #[error("eta polytope is empty")]
    EmptyPolytope,
    #[error("Riccati iteration failed to converge")]
    RiccatiDiverged,
    #[error(
        "insufficient input authority: u_max = {u_max} but C_bar qdot_max + g_bar + B_bar pddot_bar = {required}"
    )]
    InsufficientInputAuthority { u_max: f64, required: f64 },
    #[error("insufficient velocity margin: qdot_max = {qdot_max} <= pdot_bar = {pdot_bar}")]
    InsufficientVelocityMargin { qdot_max: f64, pdot_bar: f64 },
    #[error("velocity band rejected: {0}")]
    VelocityBand(String),
}

/// E_eta = {eta : theta0 <= eta1 <= 0, 0 <= eta2 <= thetadot_bar, n1' eta <= 0}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaPolytope {
    pub theta0: f64,
    pub thetadot_bar: f64,
    pub n1: Vector2<f64>,
}

impl EtaPolytope {
    /// Slacks of (eta1 - theta0, -eta1, eta2, thetadot_bar - eta2, -n1' eta).
    pub fn margins(&self, eta: &Vector2<f64>) -> [f64; 5] {
        [
            eta[0] - self.theta0,
            -eta[0],
            eta[1],
            self.thetadot_bar - eta[1],
            -self.n1.dot(eta),
        ]
    }

    pub fn contains(&self, eta: &Vector2<f64>, tol: f64) -> bool {
        self.margins(eta).iter().all(|&m| m >= -tol)
    }

    /// Vertices in counter-clockwise order.
    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        let square = [
            Vector2::new(self.theta0, 0.0),
            Vector2::new(0.0, 0.0),
            Vector2::new(0.0, self.thetadot_bar),
            Vector2::new(self.theta0, self.thetadot_bar),
        ];
        // Clip the box with the half plane n1' eta <= 0.
        let mut out = Vec::with_capacity(5);
        for i in 0..4 {
            let a = square[i];
            let b = square[(i + 1) % 4];
            let (fa, fb) = (self.n1.dot(&a), self.n1.dot(&b));
            if fa <= 0.0 {
                out.push(a);
            }
            if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
                out.push(a + (b - a) * (fa / (fa - fb)));
            }
        }
        out
    }
}

pub fn build_eta_polytope(
    gain: &EtaGain,
    theta0: f64,
    thetadot_bar: f64,
) -> Result<EtaPolytope, SynthesisError> {
    let (slow, fast) = gain.eigenvalues().ok_or(SynthesisError::ComplexEtaEigenvalues)?;
    if !(theta0 < 0.0 && thetadot_bar > 0.0) {
        return Err(SynthesisError::EmptyPolytope);
    }
    // Eigenvector of [[0, 1], [k1, k2]] for l is (1, l); n1 is normal to the fast one.
    let mut n1 = Vector2::new(-fast, 1.0).normalize();
    // Orient so that the slow direction pointing into eta1 < 0 is admissible.
    if n1.dot(&Vector2::new(-1.0, -slow)) > 0.0 {
        n1 = -n1;
    }
    Ok(EtaPolytope {
        theta0,
        thetadot_bar,
        n1,
    })
}

/// Band terminal set on the path speed used when a speed is assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityBand {
    pub thetadot_ref: f64,
    pub band: f64,
    /// v_E = -k_v (thetadot - thetadot_ref)
    pub k_v: f64,
}

impl VelocityBand {
    pub fn terminal_v(&self, thetadot: f64) -> f64 {
        -self.k_v * (thetadot - self.thetadot_ref)
    }

    pub fn margin(&self, thetadot: f64) -> f64 {
        self.band - (thetadot - self.thetadot_ref).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub inside: bool,
    /// level - xi' P xi
    pub ellipsoid: f64,
    /// Polytope (or band) slacks; unused entries are +inf.
    pub eta: [f64; 5],
}

impl Membership {
    pub fn margin(&self) -> f64 {
        self.eta.iter().fold(self.ellipsoid, |m, &v| m.min(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub p_xi: Matrix4<f64>,
    pub level: f64,
    pub eta_poly: EtaPolytope,
    pub xi_gain: XiGain,
    pub eta_gain: EtaGain,
    pub bounds: ModelBounds,
    pub level_result: LevelResult,
}

impl TerminalSet {
    pub fn ellipsoid_value(&self, xi: &Vector4<f64>) -> f64 {
        xi.dot(&(self.p_xi * xi))
    }

    pub fn membership(&self, s: &AugmentedState, path: &PathSpec) -> Membership {
        let c = to_transverse(s, path);
        let ellipsoid = self.level - self.ellipsoid_value(&c.xi());
        let eta = self.eta_poly.margins(&c.eta);
        let m = Membership {
            inside: false,
            ellipsoid,
            eta,
        };
        Membership {
            inside: m.margin() >= 0.0,
            ..m
        }
    }

    pub fn membership_velocity(
        &self,
        s: &AugmentedState,
        path: &PathSpec,
        band: &VelocityBand,
    ) -> Membership {
        let c = to_transverse(s, path);
        let ellipsoid = self.level - self.ellipsoid_value(&c.xi());
        let mut eta = [f64::INFINITY; 5];
        eta[0] = band.margin(c.eta[1]);
        let m = Membership {
            inside: false,
            ellipsoid,
            eta,
        };
        Membership {
            inside: m.margin() >= 0.0,
            ..m
        }
    }

    /// Admits a speed band only if the synthesized level stays certified:
    /// the band lies within [0, thetadot_bar], the band feedback is no larger
    /// than the polytope's, and the path derivative bounds hold for every theta.
    pub fn velocity_band(
        &self,
        path: &PathSpec,
        thetadot_ref: f64,
        band: f64,
        k_v: f64,
    ) -> Result<VelocityBand, SynthesisError> {
        let reject = |m: String| Err(SynthesisError::VelocityBand(m));
        if !(band > 0.0 && k_v > 0.0) {
            return reject(format!("band ({band}) and k_v ({k_v}) must be positive"));
        }
        if thetadot_ref - band < 0.0 || thetadot_ref + band > self.bounds.eta2_max {
            return reject(format!(
                "[{}, {}] must lie within [0, {}]",
                thetadot_ref - band,
                thetadot_ref + band,
                self.bounds.eta2_max
            ));
        }
        if k_v * band > self.bounds.v_sup {
            return reject(format!(
                "k_v band = {} exceeds the certified virtual input {}",
                k_v * band,
                self.bounds.v_sup
            ));
        }
        // Periodic path: one full period covers every theta.
        let period = if path.omega2 != 0.0 {
            2.0 * std::f64::consts::PI / path.omega2.abs()
        } else {
            1.0
        };
        let (d1, d2) = path_derivative_maxima(path, 0.0, period, 100_000);
        if d1 > self.bounds.dp_max || d2 > self.bounds.ddp_max {
            return reject("path derivative bounds do not hold off the parameter interval".into());
        }
        Ok(VelocityBand {
            thetadot_ref,
            band,
            k_v,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub params: RobotParams,
    pub path: PathSpec,
    pub constraints: ConstraintSet,
    pub eta_gain: EtaGain,
    pub thetadot_bar: f64,
    pub q_xi_diag: [f64; 4],
    pub r_xi_diag: [f64; 2],
    pub bound_options: BoundOptions,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            params: RobotParams::default(),
            path: PathSpec::default(),
            constraints: ConstraintSet::default(),
            eta_gain: EtaGain::default(),
            thetadot_bar: 0.4,
            q_xi_diag: [1.0; 4],
            r_xi_diag: [1.0; 2],
            bound_options: BoundOptions::default(),
        }
    }
}

pub fn synthesize(cfg: &SynthesisConfig) -> Result<TerminalSet, SynthesisError> {
    cfg.params.validate()?;
    cfg.path.validate()?;
    cfg.constraints.validate()?;
    cfg.eta_gain.check(cfg.path.theta0, cfg.thetadot_bar)?;
    let poly = build_eta_polytope(&cfg.eta_gain, cfg.path.theta0, cfg.thetadot_bar)?;
    let bounds = compute_bounds(
        &cfg.params,
        &cfg.path,
        &poly,
        &cfg.eta_gain,
        &cfg.constraints,
        &cfg.bound_options,
    )?;
    let q = Matrix4::from_diagonal(&Vector4::from(cfg.q_xi_diag));
    let r = Matrix2::from_diagonal(&Vector2::from(cfg.r_xi_diag));
    let xi_gain = solve_care(&q, &r)?;
    let lv = maximize_level(&xi_gain, &bounds, &cfg.constraints)?;
    Ok(TerminalSet {
        p_xi: xi_gain.p_xi,
        level: lv.level(),
        eta_poly: poly,
        xi_gain,
        eta_gain: cfg.eta_gain,
        bounds,
        level_result: lv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PathParamState, RobotState};
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_vector_matches_exact_eigen_data() {
        let p = build_eta_polytope(&EtaGain::default(), -5.3, 0.4).unwrap();
        let n = Vector2::new(1.25, 1.0).normalize();
        assert_abs_diff_eq!(p.n1, n, epsilon = 1e-12);
        assert!((p.n1 - Vector2::new(0.78, 0.63)).amax() < 0.01);
    }

    #[test]
    fn polytope_membership_examples() {
        let p = build_eta_polytope(&EtaGain::default(), -5.3, 0.4).unwrap();
        assert!(p.contains(&Vector2::new(-5.3, 0.0), 0.0));
        assert_abs_diff_eq!(p.n1.dot(&Vector2::new(-5.3, 0.0)), -4.1386, epsilon = 1e-4);
        assert!(!p.contains(&Vector2::new(0.0, 0.4), 0.0));
        assert_abs_diff_eq!(p.n1.dot(&Vector2::new(0.0, 0.4)), 0.2499, epsilon = 1e-4);
        assert!(p.contains(&Vector2::zeros(), 0.0));
        assert!(p.margins(&Vector2::zeros()).iter().any(|&m| m == 0.0));
    }

    #[test]
    fn polytope_vertices() {
        let p = build_eta_polytope(&EtaGain::default(), -5.3, 0.4).unwrap();
        let v = p.vertices();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| p.contains(x, 1e-12)));
        assert!(v.iter().any(|x| (x - Vector2::new(-0.32, 0.4)).norm() < 1e-12));
    }

    #[test]
    fn complex_eigenvalues_are_rejected() {
        let g = EtaGain { k1: -1.0, k2: -1.0 };
        assert_eq!(
            build_eta_polytope(&g, -5.3, 0.4).unwrap_err(),
            SynthesisError::ComplexEtaEigenvalues
        );
    }

    #[test]
    fn default_synthesis() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let s3 = 3f64.sqrt();
        assert_abs_diff_eq!(ts.p_xi[(0, 0)], s3, epsilon = 1e-9);
        assert_abs_diff_eq!(ts.p_xi[(0, 2)], 1.0, epsilon = 1e-9);
        assert!((ts.level - 3.13).abs() < 0.313);
    }

    #[test]
    fn membership_examples() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let path = PathSpec::default();
        let end = AugmentedState::new(
            RobotState {
                q: path.value(0.0),
                qdot: Vector2::zeros(),
            },
            PathParamState::new(0.0, 0.0),
        );
        let m = ts.membership(&end, &path);
        assert!(m.inside);
        assert_eq!(m.ellipsoid, ts.level);
        let on_path = |th: f64, thd: f64| {
            AugmentedState::new(
                RobotState {
                    q: path.value(th),
                    qdot: path.deriv1(th) * thd,
                },
                PathParamState::new(th, thd),
            )
        };
        let m = ts.membership(&on_path(0.0, 0.4), &path);
        assert!(!m.inside);
        assert!(m.eta[4] < 0.0);
        // n1' (theta0, thetadot_bar) = -3.89, so this corner is admissible.
        assert!(ts.membership(&on_path(-5.3, 0.4), &path).inside);
        // Boundary of the ellipsoid.
        let xi = Vector4::new(1.0, -0.5, 0.3, 0.2);
        let xi = xi * (ts.level / ts.ellipsoid_value(&xi)).sqrt();
        let c = crate::transverse::TransverseCoords::from_parts(&xi, &Vector2::new(-3.0, 0.1));
        let s = crate::transverse::from_transverse(&c, &path);
        assert!(ts.membership(&s, &path).ellipsoid.abs() < 1e-9);
    }

    #[test]
    fn velocity_band_admission() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let path = PathSpec::default();
        assert!(ts.velocity_band(&path, 0.2, 0.05, 2.0).is_ok());
        assert!(ts.velocity_band(&path, 0.38, 0.05, 2.0).is_err());
        assert!(ts.velocity_band(&path, 0.2, 0.05, 20.0).is_err());
        assert!(ts.velocity_band(&path, 0.2, -0.05, 2.0).is_err());
    }
}
