//! Transverse normal form of the augmented robot system and the terminal
//! feedback pair (u_E, v_E).
//!
//! The arm has no internal dynamics with respect to y = q, so eta is exactly
//! the timing-law state and its dynamics are the double integrator.

use crate::dynamics::{
    joint_acceleration, AugmentedState, DynamicsError, InvalidParameter, PathParamState, PathSpec,
    RobotParams, RobotState,
};
use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};

/// Vector relative degree of y = q.
pub const RELATIVE_DEGREE: [usize; 2] = [2, 2];
/// Length of the timing-law integrator chain.
pub const TIMING_ORDER: usize = 2;
/// Dimension of the xi block.
pub const XI_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseCoords {
    pub xi1: Vector2<f64>,
    pub xi2: Vector2<f64>,
    pub eta: Vector2<f64>,
}

impl TransverseCoords {
    pub fn xi(&self) -> Vector4<f64> {
        Vector4::new(self.xi1[0], self.xi1[1], self.xi2[0], self.xi2[1])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.xi1[0],
            self.xi1[1],
            self.xi2[0],
            self.xi2[1],
            self.eta[0],
            self.eta[1],
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            xi1: Vector2::new(v[0], v[1]),
            xi2: Vector2::new(v[2], v[3]),
            eta: Vector2::new(v[4], v[5]),
        }
    }

    pub fn from_parts(xi: &Vector4<f64>, eta: &Vector2<f64>) -> Self {
        Self {
            xi1: Vector2::new(xi[0], xi[1]),
            xi2: Vector2::new(xi[2], xi[3]),
            eta: *eta,
        }
    }
}

pub fn to_transverse(s: &AugmentedState, path: &PathSpec) -> TransverseCoords {
    let (p, dp, _) = path.jet(s.z.theta);
    TransverseCoords {
        xi1: s.x.q - p,
        xi2: s.x.qdot - dp * s.z.thetadot,
        eta: s.z.as_vector(),
    }
}

pub fn from_transverse(c: &TransverseCoords, path: &PathSpec) -> AugmentedState {
    let (p, dp, _) = path.jet(c.eta[0]);
    AugmentedState {
        x: RobotState {
            q: c.xi1 + p,
            qdot: c.xi2 + dp * c.eta[1],
        },
        z: PathParamState::new(c.eta[0], c.eta[1]),
    }
}

/// Vector field of the augmented system written in (xi, eta).
pub fn transverse_rhs(
    c: &TransverseCoords,
    u: &Vector2<f64>,
    v: f64,
    params: &RobotParams,
    path: &PathSpec,
) -> Result<TransverseCoords, DynamicsError> {
    let (p, dp, ddp) = path.jet(c.eta[0]);
    let q = c.xi1 + p;
    let qdot = c.xi2 + dp * c.eta[1];
    let qddot = joint_acceleration(&q, &qdot, u, params)?;
    Ok(TransverseCoords {
        xi1: c.xi2,
        xi2: qddot - ddp * (c.eta[1] * c.eta[1]) - dp * v,
        eta: Vector2::new(c.eta[1], v),
    })
}

/// Linear feedback v_E = k1 eta1 + k2 eta2 on the timing law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaGain {
    pub k1: f64,
    pub k2: f64,
}

impl EtaGain {
    /// Admits the gain only if the closed loop has distinct real negative
    /// eigenvalues and never reverses direction from the corner (theta0, thetadot_bar).
    pub fn new(k1: f64, k2: f64, theta0: f64, thetadot_bar: f64) -> Result<Self, InvalidParameter> {
        let g = Self { k1, k2 };
        g.check(theta0, thetadot_bar)?;
        Ok(g)
    }

    pub fn check(&self, theta0: f64, thetadot_bar: f64) -> Result<(), InvalidParameter> {
        let Self { k1, k2 } = *self;
        if !(k1 < 0.0) {
            return Err(InvalidParameter::new("eta gain", format!("k1 must be negative, got {k1}")));
        }
        if !(k2 < 0.0) {
            return Err(InvalidParameter::new("eta gain", format!("k2 must be negative, got {k2}")));
        }
        if !(k2 * k2 > -4.0 * k1) {
            return Err(InvalidParameter::new(
                "eta gain",
                format!("k2^2 = {} must exceed -4 k1 = {}", k2 * k2, -4.0 * k1),
            ));
        }
        if !(thetadot_bar > 0.0) {
            return Err(InvalidParameter::new("eta gain", "thetadot_bar must be positive"));
        }
        let cap = -k1 * theta0 / thetadot_bar;
        if !(k2 <= cap) {
            return Err(InvalidParameter::new(
                "eta gain",
                format!("k2 = {k2} must not exceed -k1 theta0 / thetadot_bar = {cap}"),
            ));
        }
        Ok(())
    }

    pub fn closed_loop(&self) -> Matrix2<f64> {
        Matrix2::new(0.0, 1.0, self.k1, self.k2)
    }

    /// Roots of l^2 - k2 l - k1 ordered (slow, fast).
    pub fn eigenvalues(&self) -> Option<(f64, f64)> {
        let disc = self.k2 * self.k2 + 4.0 * self.k1;
        if disc <= 0.0 {
            return None;
        }
        let r = disc.sqrt();
        Some((0.5 * (self.k2 + r), 0.5 * (self.k2 - r)))
    }
}

impl Default for EtaGain {
    fn default() -> Self {
        Self { k1: -0.1, k2: -1.33 }
    }
}

pub fn terminal_v(eta: &Vector2<f64>, gain: &EtaGain) -> f64 {
    gain.k1 * eta[0] + gain.k2 * eta[1]
}

/// Riccati data of the xi block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiGain {
    pub k_xi: Matrix2x4<f64>,
    pub p_xi: Matrix4<f64>,
}

/// The fixed double-integrator pair (A_xi, B_xi) of the xi block.
pub fn xi_system() -> (Matrix4<f64>, nalgebra::Matrix4x2<f64>) {
    let mut a = Matrix4::zeros();
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    let mut b = nalgebra::Matrix4x2::zeros();
    b[(2, 0)] = 1.0;
    b[(3, 1)] = 1.0;
    (a, b)
}

impl XiGain {
    pub fn closed_loop(&self) -> Matrix4<f64> {
        let (a, b) = xi_system();
        a - b * self.k_xi
    }

    /// Largest real part of the closed-loop eigenvalues.
    pub fn spectral_abscissa(&self) -> f64 {
        self.closed_loop()
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn lyapunov(&self, xi: &Vector4<f64>) -> f64 {
        xi.dot(&(self.p_xi * xi))
    }
}

/// u_E for a given virtual input; the xi error dynamics become xi2' = -K xi.
pub fn terminal_u_with_v(
    c: &TransverseCoords,
    gains: &XiGain,
    v: f64,
    params: &RobotParams,
    path: &PathSpec,
) -> Vector2<f64> {
    let (p, dp, ddp) = path.jet(c.eta[0]);
    let q = c.xi1 + p;
    let qdot = c.xi2 + dp * c.eta[1];
    let pddot = ddp * (c.eta[1] * c.eta[1]) + dp * v;
    let a = -gains.k_xi * c.xi() + pddot;
    params.inertia(&q) * a + params.coriolis(&q, &qdot) * qdot + params.gravity(&q)
}

pub fn terminal_u(
    c: &TransverseCoords,
    gains: &XiGain,
    eta_gain: &EtaGain,
    params: &RobotParams,
    path: &PathSpec,
) -> Vector2<f64> {
    terminal_u_with_v(c, gains, terminal_v(&c.eta, eta_gain), params, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lqr_gain() -> XiGain {
        let s3 = 3f64.sqrt();
        let mut k = Matrix2x4::zeros();
        k[(0, 0)] = 1.0;
        k[(1, 1)] = 1.0;
        k[(0, 2)] = s3;
        k[(1, 3)] = s3;
        let mut p = Matrix4::identity() * s3;
        p[(0, 2)] = 1.0;
        p[(2, 0)] = 1.0;
        p[(1, 3)] = 1.0;
        p[(3, 1)] = 1.0;
        XiGain { k_xi: k, p_xi: p }
    }

    #[test]
    fn on_path_state_maps_to_zero_xi() {
        let path = PathSpec::default();
        let (th, thd) = (-2.2, 0.3);
        let s = AugmentedState::new(
            RobotState {
                q: path.value(th),
                qdot: path.deriv1(th) * thd,
            },
            PathParamState::new(th, thd),
        );
        let c = to_transverse(&s, &path);
        assert_eq!(c.xi(), Vector4::zeros());
        assert_eq!(c.eta, Vector2::new(th, thd));
    }

    #[test]
    fn start_state_error() {
        let path = PathSpec::default();
        let s = AugmentedState::new(
            RobotState::new(-5.86, 2.43, 0.0, 0.0),
            PathParamState::new(-5.3, 0.0),
        );
        let c = to_transverse(&s, &path);
        assert_abs_diff_eq!(c.xi1, Vector2::new(-5.86, 2.43) - path.value(-5.3), epsilon = 0.0);
        // numpy evaluation of p(-5.3)
        assert_abs_diff_eq!(path.value(-5.3)[0], -6.347197551196598, epsilon = 1e-12);
        assert_abs_diff_eq!(path.value(-5.3)[1], 3.092081673665707, epsilon = 1e-12);
        assert_eq!(c.xi2, Vector2::zeros());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            q1 in -7.0..2.0f64, q2 in -4.0..4.0f64,
            qd1 in -5.0..5.0f64, qd2 in -5.0..5.0f64,
            th in -6.0..1.0f64, thd in -1.0..1.0f64,
        ) {
            let path = PathSpec::default();
            let s = AugmentedState::new(RobotState::new(q1, q2, qd1, qd2), PathParamState::new(th, thd));
            let back = from_transverse(&to_transverse(&s, &path), &path);
            prop_assert!((back.to_vector() - s.to_vector()).amax() < 1e-12);
            let c = TransverseCoords::from_vector(&s.to_vector());
            let back = to_transverse(&from_transverse(&c, &path), &path);
            prop_assert!((back.to_vector() - c.to_vector()).amax() < 1e-12);
        }

        #[test]
        fn eta_dynamics_are_the_timing_law(
            x in proptest::array::uniform6(-2.0..2.0f64),
            u1 in -500.0..500.0f64, u2 in -500.0..500.0f64, v in -50.0..50.0f64,
        ) {
            let c = TransverseCoords::from_vector(&Vector6::from_column_slice(&x));
            let d = transverse_rhs(&c, &Vector2::new(u1, u2), v, &RobotParams::default(), &PathSpec::default()).unwrap();
            prop_assert_eq!(d.eta, Vector2::new(c.eta[1], v));
            prop_assert_eq!(d.xi1, c.xi2);
        }
    }

    #[test]
    fn path_manifold_is_invariant_under_terminal_pair() {
        let params = RobotParams::default();
        let path = PathSpec::default();
        let eg = EtaGain::default();
        let gains = lqr_gain();
        for k in 0..20 {
            let eta = Vector2::new(-5.0 + 0.25 * k as f64, 0.02 * k as f64);
            let c = TransverseCoords::from_parts(&Vector4::zeros(), &eta);
            let u = terminal_u(&c, &gains, &eg, &params, &path);
            let d = transverse_rhs(&c, &u, terminal_v(&eta, &eg), &params, &path).unwrap();
            assert!(d.xi().amax() < 1e-9, "{:?}", d.xi());
        }
    }

    #[test]
    fn terminal_u_at_path_end_is_gravity_compensation() {
        let params = RobotParams::default();
        let path = PathSpec::default();
        let c = TransverseCoords::from_vector(&Vector6::zeros());
        let u = terminal_u(&c, &lqr_gain(), &EtaGain::default(), &params, &path);
        assert_abs_diff_eq!(u, params.gravity(&path.value(0.0)), epsilon = 1e-12);
    }

    #[test]
    fn xi_closed_loop_is_linear() {
        let params = RobotParams::default();
        let path = PathSpec::default();
        let eg = EtaGain::default();
        let gains = lqr_gain();
        let eta = Vector2::new(-3.1, 0.2);
        let xi_ddot = |xi: Vector4<f64>| {
            let c = TransverseCoords::from_parts(&xi, &eta);
            let u = terminal_u(&c, &gains, &eg, &params, &path);
            transverse_rhs(&c, &u, terminal_v(&eta, &eg), &params, &path).unwrap().xi2
        };
        let a = Vector4::new(0.1, -0.2, 0.05, 0.3);
        let b = Vector4::new(-0.3, 0.1, 0.2, -0.1);
        // Second difference vanishes for an affine map.
        let second = xi_ddot(a + b) - xi_ddot(a) - xi_ddot(b) + xi_ddot(Vector4::zeros());
        assert!(second.amax() < 1e-8, "{second:?}");
        assert_abs_diff_eq!(xi_ddot(a), -gains.k_xi * a, epsilon = 1e-8);
    }

    #[test]
    fn lyapunov_function_decreases_along_closed_loop() {
        let params = RobotParams::default();
        let path = PathSpec::default();
        let eg = EtaGain::default();
        let gains = lqr_gain();
        let x0 = Vector6::new(0.05, -0.04, 0.02, 0.03, -4.0, 0.1);
        let traj = crate::dynamics::integrate(
            |_, x: &Vector6<f64>| {
                let c = TransverseCoords::from_vector(x);
                let u = terminal_u(&c, &gains, &eg, &params, &path);
                Ok(transverse_rhs(&c, &u, terminal_v(&c.eta, &eg), &params, &path)?.to_vector())
            },
            x0,
            0.0,
            10.0,
            0.01,
        )
        .unwrap();
        let vals: Vec<f64> = traj
            .states
            .iter()
            .map(|x| gains.lyapunov(&TransverseCoords::from_vector(x).xi()))
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn terminal_v_examples() {
        let g = EtaGain::default();
        assert_eq!(terminal_v(&Vector2::zeros(), &g), 0.0);
        assert_abs_diff_eq!(terminal_v(&Vector2::new(-5.3, 0.0), &g), 0.53, epsilon = 1e-15);
        let (slow, fast) = g.eigenvalues().unwrap();
        // 1.33^2 - 0.4 = 1.17^2, so the roots are exact.
        assert_abs_diff_eq!(slow, -0.08, epsilon = 1e-12);
        assert_abs_diff_eq!(fast, -1.25, epsilon = 1e-12);
    }

    #[test]
    fn eta_gain_admission() {
        assert!(EtaGain::new(-0.1, -1.33, -5.3, 0.4).is_ok());
        // -(-0.1)(-5.3)/0.4 = -1.325
        assert!(EtaGain::new(-0.1, -1.32, -5.3, 0.4).is_err());
        assert!(EtaGain::new(0.1, -1.33, -5.3, 0.4).is_err());
        assert!(EtaGain::new(-0.1, 1.33, -5.3, 0.4).is_err());
        assert!(EtaGain::new(-1.0, -1.5, -5.3, 0.4).is_err());
    }

    #[test]
    fn lqr_closed_loop_is_hurwitz() {
        let a = lqr_gain().spectral_abscissa();
        assert_abs_diff_eq!(a, -3f64.sqrt() / 2.0, epsilon = 1e-9);
    }
}
