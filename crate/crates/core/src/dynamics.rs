//! Robot and timing-law vector fields, the augmented system, the reference
//! path and a fixed-step RK4 integrator.
//!
//! Every other module evaluates the plant through the functions in here, so
//! the OCP predictions and the simulated plant share one numerical model.

use nalgebra::{Matrix2, SVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Inertia matrices with a determinant at or below this are treated as singular.
pub const INERTIA_DET_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DynamicsError {
    #[error("inertia matrix is singular (det = {det:e}) at q = ({q1}, {q2})")]
    SingularInertia { det: f64, q1: f64, q2: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid {what}: {reason}")]
pub struct InvalidParameter {
    pub what: &'static str,
    pub reason: String,
}

impl InvalidParameter {
    pub(crate) fn new(what: &'static str, reason: impl Into<String>) -> Self {
        Self {
            what,
            reason: reason.into(),
        }
    }
}

/// Model coefficients of the planar two-link arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
    pub c1: f64,
    pub g1: f64,
    pub g2: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            b1: 200.0,
            b2: 50.0,
            b3: 23.5,
            b4: 25.0,
            b5: 122.5,
            c1: -25.0,
            g1: 784.8,
            g2: 245.3,
            l1: 0.5,
            l2: 0.5,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<(), InvalidParameter> {
        let positive = [
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("b4", self.b4),
            ("b5", self.b5),
            ("g1", self.g1),
            ("g2", self.g2),
            ("l1", self.l1),
            ("l2", self.l2),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(InvalidParameter::new(
                    "robot parameters",
                    format!("{name} must be finite and positive, got {value}"),
                ));
            }
        }
        if !(self.c1.is_finite() && self.c1 < 0.0) {
            return Err(InvalidParameter::new(
                "robot parameters",
                format!("c1 must be finite and negative, got {}", self.c1),
            ));
        }
        // B(q) depends on q2 only through cos(q2); it is affine in cos(q2), so
        // positive definiteness at both ends of [-1, 1] covers every q2.
        for c in [-1.0, 1.0] {
            let b11 = self.b1 + self.b2 * c;
            let b12 = self.b3 + self.b4 * c;
            if b11 <= 0.0 || b11 * self.b5 - b12 * b12 <= INERTIA_DET_MIN {
                return Err(InvalidParameter::new(
                    "robot parameters",
                    format!("inertia matrix is not positive definite at cos(q2) = {c}"),
                ));
            }
        }
        Ok(())
    }

    pub fn inertia(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let c2 = q[1].cos();
        let off = self.b3 + self.b4 * c2;
        Matrix2::new(self.b1 + self.b2 * c2, off, off, self.b5)
    }

    /// Centrifugal and Coriolis matrix C(q, qdot).
    pub fn coriolis(&self, q: &Vector2<f64>, qdot: &Vector2<f64>) -> Matrix2<f64> {
        let s = -self.c1 * q[1].sin();
        Matrix2::new(
            s * qdot[0],
            s * (qdot[0] + qdot[1]),
            -s * qdot[0],
            0.0,
        )
    }

    pub fn gravity(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let c12 = (q[0] + q[1]).cos();
        Vector2::new(self.g1 * q[0].cos() + self.g2 * c12, self.g2 * c12)
    }

    /// Tool position in Cartesian coordinates (m).
    pub fn cartesian_output(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let s = q[0] + q[1];
        Vector2::new(
            self.l1 * q[0].cos() + self.l2 * s.cos(),
            self.l1 * q[0].sin() + self.l2 * s.sin(),
        )
    }
}

pub fn gravity(q: &Vector2<f64>, params: &RobotParams) -> Vector2<f64> {
    params.gravity(q)
}

pub fn cartesian_output(q: &Vector2<f64>, params: &RobotParams) -> Vector2<f64> {
    params.cartesian_output(q)
}

/// Joint angles and velocities (rad, rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub q: Vector2<f64>,
    pub qdot: Vector2<f64>,
}

impl RobotState {
    pub fn new(q1: f64, q2: f64, qd1: f64, qd2: f64) -> Self {
        Self {
            q: Vector2::new(q1, q2),
            qdot: Vector2::new(qd1, qd2),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

/// Timing-law state (theta, theta_dot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParamState {
    pub theta: f64,
    pub thetadot: f64,
}

impl PathParamState {
    pub fn new(theta: f64, thetadot: f64) -> Self {
        Self { theta, thetadot }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.theta, self.thetadot)
    }

    /// Exact flow of the double integrator under a constant virtual input.
    pub fn advance(&self, v: f64, dt: f64) -> Self {
        Self {
            theta: self.theta + self.thetadot * dt + 0.5 * v * dt * dt,
            thetadot: self.thetadot + v * dt,
        }
    }
}

/// Plant state stacked with the timing-law state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: RobotState,
    pub z: PathParamState,
}

impl AugmentedState {
    pub fn new(x: RobotState, z: PathParamState) -> Self {
        Self { x, z }
    }

    /// Packs as (q1, q2, qd1, qd2, theta, thetadot).
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.x.q[0],
            self.x.q[1],
            self.x.qdot[0],
            self.x.qdot[1],
            self.z.theta,
            self.z.thetadot,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            x: RobotState::new(v[0], v[1], v[2], v[3]),
            z: PathParamState::new(v[4], v[5]),
        }
    }
}

/// Joint-space reference path
/// p(theta) = (theta - pi/3, omega1 sin(omega2 (theta - pi/3))) on [theta0, theta1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub theta0: f64,
    pub theta1: f64,
    pub omega1: f64,
    pub omega2: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            theta0: -5.3,
            theta1: 0.0,
            omega1: 5.0,
            omega2: 0.6,
        }
    }
}

const PATH_SHIFT: f64 = PI / 3.0;

impl PathSpec {
    pub fn validate(&self) -> Result<(), InvalidParameter> {
        if !(self.theta0.is_finite() && self.theta1.is_finite() && self.theta0 < self.theta1) {
            return Err(InvalidParameter::new(
                "path",
                format!(
                    "need theta0 < theta1, got [{}, {}]",
                    self.theta0, self.theta1
                ),
            ));
        }
        if !(self.omega1.is_finite() && self.omega2.is_finite()) {
            return Err(InvalidParameter::new("path", "shape coefficients must be finite"));
        }
        // The first component of dp/dtheta is identically 1, so the curve is
        // regular for any shape coefficients.
        Ok(())
    }

    pub fn value(&self, theta: f64) -> Vector2<f64> {
        let s = theta - PATH_SHIFT;
        Vector2::new(s, self.omega1 * (self.omega2 * s).sin())
    }

    pub fn deriv1(&self, theta: f64) -> Vector2<f64> {
        let s = theta - PATH_SHIFT;
        Vector2::new(1.0, self.omega1 * self.omega2 * (self.omega2 * s).cos())
    }

    pub fn deriv2(&self, theta: f64) -> Vector2<f64> {
        let s = theta - PATH_SHIFT;
        Vector2::new(
            0.0,
            -self.omega1 * self.omega2 * self.omega2 * (self.omega2 * s).sin(),
        )
    }

    /// p, dp/dtheta and d2p/dtheta2 with a single sin/cos evaluation.
    #[inline]
    pub fn jet(&self, theta: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let s = theta - PATH_SHIFT;
        let (sn, cs) = (self.omega2 * s).sin_cos();
        let a = self.omega1;
        let w = self.omega2;
        (
            Vector2::new(s, a * sn),
            Vector2::new(1.0, a * w * cs),
            Vector2::new(0.0, -a * w * w * sn),
        )
    }
}

/// Which set Z the timing-law state is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathParamConstraint {
    /// Z = [theta0, theta1] x [0, inf): forward motion towards the path end.
    Bounded,
    /// Z = R^2, used when a path velocity is assigned.
    Free,
}

/// Box constraints on inputs, joint velocities and the virtual input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub u_max: f64,
    pub qdot_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub z_set: PathParamConstraint,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            u_max: 4000.0,
            qdot_max: 1.5 * PI,
            v_min: -50.0,
            v_max: 50.0,
            z_set: PathParamConstraint::Bounded,
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), InvalidParameter> {
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return Err(InvalidParameter::new("constraints", "u_max must be positive"));
        }
        if !(self.qdot_max > 0.0 && self.qdot_max.is_finite()) {
            return Err(InvalidParameter::new("constraints", "qdot_max must be positive"));
        }
        if !(self.v_min < 0.0 && 0.0 < self.v_max && self.v_min.is_finite() && self.v_max.is_finite())
        {
            return Err(InvalidParameter::new(
                "constraints",
                format!("need v_min < 0 < v_max, got [{}, {}]", self.v_min, self.v_max),
            ));
        }
        Ok(())
    }

    pub fn input_ok(&self, u: &Vector2<f64>) -> bool {
        u.amax() <= self.u_max
    }

    pub fn velocity_ok(&self, qdot: &Vector2<f64>) -> bool {
        qdot.amax() <= self.qdot_max
    }

    pub fn z_ok(&self, z: &PathParamState, path: &PathSpec) -> bool {
        match self.z_set {
            PathParamConstraint::Bounded => {
                z.theta >= path.theta0 && z.theta <= path.theta1 && z.thetadot >= 0.0
            }
            PathParamConstraint::Free => true,
        }
    }
}

/// Returns (qdot, B^-1(q)(u - C(q,qdot) qdot - g(q))).
pub fn robot_rhs(
    s: &RobotState,
    u: &Vector2<f64>,
    params: &RobotParams,
) -> Result<RobotState, DynamicsError> {
    let qddot = joint_acceleration(&s.q, &s.qdot, u, params)?;
    Ok(RobotState {
        q: s.qdot,
        qdot: qddot,
    })
}

#[inline]
pub(crate) fn joint_acceleration(
    q: &Vector2<f64>,
    qdot: &Vector2<f64>,
    u: &Vector2<f64>,
    params: &RobotParams,
) -> Result<Vector2<f64>, DynamicsError> {
    let (s2, c2) = q[1].sin_cos();
    let c1 = q[0].cos();
    let c12 = (q[0] + q[1]).cos();
    let b11 = params.b1 + params.b2 * c2;
    let b12 = params.b3 + params.b4 * c2;
    let b22 = params.b5;
    let det = b11 * b22 - b12 * b12;
    if det <= INERTIA_DET_MIN {
        return Err(DynamicsError::SingularInertia {
            det,
            q1: q[0],
            q2: q[1],
        });
    }
    let cs = -params.c1 * s2;
    // u - C qdot - g
    let r1 = u[0] - cs * (qdot[0] * qdot[0] + (qdot[0] + qdot[1]) * qdot[1])
        - (params.g1 * c1 + params.g2 * c12);
    let r2 = u[1] + cs * qdot[0] * qdot[0] - params.g2 * c12;
    let inv_det = 1.0 / det;
    Ok(Vector2::new(
        (b22 * r1 - b12 * r2) * inv_det,
        (b11 * r2 - b12 * r1) * inv_det,
    ))
}

/// theta^(2) = v.
pub fn timing_rhs(z: &PathParamState, v: f64) -> PathParamState {
    PathParamState {
        theta: z.thetadot,
        thetadot: v,
    }
}

/// Time derivative of the augmented state.
pub fn augmented_rhs(
    s: &AugmentedState,
    u: &Vector2<f64>,
    v: f64,
    params: &RobotParams,
    _path: &PathSpec,
) -> Result<AugmentedState, DynamicsError> {
    Ok(AugmentedState {
        x: robot_rhs(&s.x, u, params)?,
        z: timing_rhs(&s.z, v),
    })
}

/// Vector form of [`augmented_rhs`] used by the integrators.
#[inline]
pub fn augmented_rhs_vec(
    s: &Vector6<f64>,
    u: &Vector2<f64>,
    v: f64,
    params: &RobotParams,
) -> Result<Vector6<f64>, DynamicsError> {
    let q = Vector2::new(s[0], s[1]);
    let qdot = Vector2::new(s[2], s[3]);
    let a = joint_acceleration(&q, &qdot, u, params)?;
    Ok(Vector6::new(s[2], s[3], a[0], a[1], s[5], v))
}

/// Path error e = q - p(theta).
pub fn error_output(s: &AugmentedState, path: &PathSpec) -> Vector2<f64> {
    s.x.q - path.value(s.z.theta)
}

/// Dense output of a fixed-step integration.
#[derive(Debug, Clone)]
pub struct Trajectory<const N: usize> {
    pub times: Vec<f64>,
    pub states: Vec<SVector<f64, N>>,
}

impl<const N: usize> Trajectory<N> {
    pub fn last(&self) -> &SVector<f64, N> {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

/// One classical Runge-Kutta step.
#[inline]
pub fn rk4_step<const N: usize, F>(
    f: &mut F,
    x: &SVector<f64, N>,
    h: f64,
) -> Result<SVector<f64, N>, DynamicsError>
where
    F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>, DynamicsError>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * h)))?;
    let k3 = f(&(x + k2 * (0.5 * h)))?;
    let k4 = f(&(x + k3 * h))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Number of equal substeps of length at most `h` that tile `len`.
pub fn substep_count(len: f64, h: f64) -> usize {
    if len <= 0.0 {
        return 0;
    }
    ((len / h) - 1e-9).ceil().max(1.0) as usize
}

/// Integrates `x' = f(t, x)` on [t0, t1] with RK4 and a uniform step no
/// larger than `h`, recording every substep.
pub fn integrate<const N: usize, F>(
    mut f: F,
    x0: SVector<f64, N>,
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<Trajectory<N>, DynamicsError>
where
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>, DynamicsError>,
{
    assert!(h > 0.0, "integration step must be positive");
    let n = substep_count(t1 - t0, h);
    let mut traj = Trajectory {
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity(n + 1),
    };
    traj.times.push(t0);
    traj.states.push(x0);
    if n == 0 {
        return Ok(traj);
    }
    let step = (t1 - t0) / n as f64;
    let mut x = x0;
    for k in 0..n {
        let t = t0 + k as f64 * step;
        // RK4 stages at t, t + h/2, t + h/2, t + h.
        let k1 = f(t, &x)?;
        let k2 = f(t + 0.5 * step, &(x + k1 * (0.5 * step)))?;
        let k3 = f(t + 0.5 * step, &(x + k2 * (0.5 * step)))?;
        let k4 = f(t + step, &(x + k3 * step))?;
        x += (k1 + (k2 + k3) * 2.0 + k4) * (step / 6.0);
        let t_next = if k + 1 == n { t1 } else { t0 + (k + 1) as f64 * step };
        if !x.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite { t: t_next });
        }
        traj.times.push(t_next);
        traj.states.push(x);
    }
    Ok(traj)
}

/// Integrates `x' = f(x, w)` with `w` held constant on each segment
/// `[breakpoints[i], breakpoints[i+1])`.
pub fn integrate_piecewise<const N: usize, const M: usize, F>(
    mut f: F,
    x0: SVector<f64, N>,
    breakpoints: &[f64],
    controls: &[SVector<f64, M>],
    h: f64,
) -> Result<Trajectory<N>, DynamicsError>
where
    F: FnMut(&SVector<f64, N>, &SVector<f64, M>) -> Result<SVector<f64, N>, DynamicsError>,
{
    assert_eq!(
        breakpoints.len(),
        controls.len() + 1,
        "need one control per segment"
    );
    let mut traj = Trajectory {
        times: vec![breakpoints[0]],
        states: vec![x0],
    };
    let mut x = x0;
    for (i, w) in controls.iter().enumerate() {
        let seg = integrate(|_, s| f(s, w), x, breakpoints[i], breakpoints[i + 1], h)?;
        x = *seg.last();
        traj.times.extend_from_slice(&seg.times[1..]);
        traj.states.extend_from_slice(&seg.states[1..]);
    }
    Ok(traj)
}
