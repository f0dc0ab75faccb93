//! Upper bounds on the model terms entering the input constraint of the
//! terminal controller.

use super::{EtaPolytope, SynthesisError};
use crate::dynamics::{ConstraintSet, PathSpec, RobotParams};
use crate::transverse::EtaGain;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    /// sup ||B(q)||
    pub b_bar: f64,
    /// sup ||C(q, qdot)|| over the joint-velocity box
    pub c_bar: f64,
    /// sup ||g(q)||
    pub g_bar: f64,
    /// sup ||dp/dtheta|| on the path-parameter range of the polytope
    pub dp_max: f64,
    /// sup ||d2p/dtheta2|| on the same range
    pub ddp_max: f64,
    /// sup |K_eta eta| over the polytope
    pub v_sup: f64,
    /// sup eta2 over the polytope
    pub eta2_max: f64,
    pub pdot_bar: f64,
    pub pddot_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub grid_points: usize,
    pub inflation: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            grid_points: 100_000,
            inflation: 0.01,
        }
    }
}

fn norm2(m: &Matrix2<f64>) -> f64 {
    m.singular_values().max()
}

/// ||B|| is convex in cos(q2) (B is affine in it), so the sup sits at cos(q2) = +-1.
pub fn inertia_bound(params: &RobotParams) -> f64 {
    [-1.0f64, 1.0]
        .iter()
        .map(|&c| {
            let off = params.b3 + params.b4 * c;
            norm2(&Matrix2::new(params.b1 + params.b2 * c, off, off, params.b5))
        })
        .fold(0.0, f64::max)
}

/// ||C|| = |c1 sin q2| ||M(qdot)|| with M linear in qdot, so the sup over the
/// velocity box is at |sin q2| = 1 and a box vertex.
pub fn coriolis_bound(params: &RobotParams, qdot_max: f64) -> f64 {
    let mut best = 0.0f64;
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            let (a, b) = (s1 * qdot_max, s2 * qdot_max);
            best = best.max(norm2(&Matrix2::new(a, a + b, -a, 0.0)));
        }
    }
    params.c1.abs() * best
}

/// Attained at q = 0 where both cosines equal one.
pub fn gravity_bound(params: &RobotParams) -> f64 {
    ((params.g1 + params.g2).powi(2) + params.g2.powi(2)).sqrt()
}

/// Grid maxima of ||p'|| and ||p''|| on [a, b].
pub fn path_derivative_maxima(path: &PathSpec, a: f64, b: f64, n: usize) -> (f64, f64) {
    let n = n.max(2);
    let mut m1 = 0.0f64;
    let mut m2 = 0.0f64;
    for i in 0..n {
        let th = a + (b - a) * i as f64 / (n - 1) as f64;
        let (_, d1, d2) = path.jet(th);
        m1 = m1.max(d1.norm());
        m2 = m2.max(d2.norm());
    }
    (m1, m2)
}

pub fn compute_bounds(
    params: &RobotParams,
    path: &PathSpec,
    poly: &EtaPolytope,
    gain: &EtaGain,
    constraints: &ConstraintSet,
    opts: &BoundOptions,
) -> Result<ModelBounds, SynthesisError> {
    let verts = poly.vertices();
    if verts.len() < 3 {
        return Err(SynthesisError::EmptyPolytope);
    }
    let (lo, hi) = verts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v[0]), h.max(v[0])));
    let (dp, ddp) = path_derivative_maxima(path, lo, hi, opts.grid_points);
    let inflate = 1.0 + opts.inflation;
    let dp_max = dp * inflate;
    let ddp_max = ddp * inflate;
    // Linear functions attain their extrema over a polytope at a vertex.
    let v_sup = verts
        .iter()
        .map(|v| (gain.k1 * v[0] + gain.k2 * v[1]).abs())
        .fold(0.0, f64::max);
    let eta2_max = verts.iter().map(|v| v[1]).fold(0.0, f64::max);
    Ok(ModelBounds {
        b_bar: inertia_bound(params),
        c_bar: coriolis_bound(params, constraints.qdot_max),
        g_bar: gravity_bound(params),
        dp_max,
        ddp_max,
        v_sup,
        eta2_max,
        pdot_bar: dp_max * eta2_max,
        pddot_bar: ddp_max * eta2_max * eta2_max + dp_max * v_sup,
    })
}

/// Grid maxima of the bounded quantities; used to audit a [`ModelBounds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMaxima {
    pub b: f64,
    pub c: f64,
    pub g: f64,
    pub pdot: f64,
    pub pddot: f64,
}

/// Samples every bounded quantity on a dense grid of roughly `n` points.
pub fn grid_maxima(
    params: &RobotParams,
    path: &PathSpec,
    poly: &EtaPolytope,
    gain: &EtaGain,
    qdot_max: f64,
    n: usize,
) -> GridMaxima {
    use std::f64::consts::PI;
    let mut out = GridMaxima {
        b: 0.0,
        c: 0.0,
        g: 0.0,
        pdot: 0.0,
        pddot: 0.0,
    };
    let side = (n as f64).sqrt().ceil() as usize;
    for i in 0..side {
        let q1 = -PI + 2.0 * PI * i as f64 / (side - 1) as f64;
        for j in 0..side {
            let q2 = -PI + 2.0 * PI * j as f64 / (side - 1) as f64;
            let q = Vector2::new(q1, q2);
            out.b = out.b.max(norm2(&params.inertia(&q)));
            out.g = out.g.max(params.gravity(&q).norm());
            let qd = Vector2::new(
                qdot_max * (2.0 * i as f64 / (side - 1) as f64 - 1.0),
                qdot_max * (2.0 * j as f64 / (side - 1) as f64 - 1.0),
            );
            // sin(q2) = 1 maximizes the velocity factor for every qdot.
            out.c = out
                .c
                .max(norm2(&params.coriolis(&Vector2::new(0.0, PI / 2.0), &qd)));
            out.c = out.c.max(norm2(&params.coriolis(&q, &qd)));
        }
    }
    let (lo, hi, h_lo, h_hi) = (poly.theta0, 0.0, 0.0, poly.thetadot_bar);
    for i in 0..side {
        let e1 = lo + (hi - lo) * i as f64 / (side - 1) as f64;
        for j in 0..side {
            let e2 = h_lo + (h_hi - h_lo) * j as f64 / (side - 1) as f64;
            let eta = Vector2::new(e1, e2);
            if !poly.contains(&eta, 0.0) {
                continue;
            }
            let (_, d1, d2) = path.jet(e1);
            let v = gain.k1 * e1 + gain.k2 * e2;
            out.pdot = out.pdot.max((d1 * e2).norm());
            out.pddot = out.pddot.max((d2 * e2 * e2 + d1 * v).norm());
        }
    }
    out
}
