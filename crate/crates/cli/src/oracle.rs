//! Reference values computed independently of the synthesis pipeline.

use mpfc_core::dynamics::{PathSpec, RobotParams};
use mpfc_core::terminal_set::bounds::grid_maxima;
use mpfc_core::terminal_set::{build_eta_polytope, synthesize, SynthesisConfig};
use std::fmt::Write;

pub const NAMES: [&str; 5] = ["care", "eta-gain", "gravity-offset", "bounds", "inequalities"];

/// Torque offset printed with the worked example.
const PRINTED_U_TILDE: [f64; 2] = [263.0, -262.5];

pub fn render(name: &str, cfg: &SynthesisConfig) -> Result<String, String> {
    let mut out = String::new();
    match name {
        "care" => care(&mut out, cfg),
        "eta-gain" => eta_gain(&mut out, cfg),
        "gravity-offset" => gravity_offset(&mut out, &cfg.params, &cfg.path),
        "bounds" => bounds(&mut out, cfg)?,
        "inequalities" => inequalities(&mut out, cfg)?,
        _ => return Err(format!("unknown oracle {name:?}; expected one of {}", NAMES.join(", "))),
    }
    Ok(out)
}

/// Scalar double integrator with unit weights: P = [[sqrt(3), 1], [1, sqrt(3)]],
/// so P1 = sqrt(3) I and P2 = I blockwise.
fn care(out: &mut String, cfg: &SynthesisConfig) {
    let unit = cfg.q_xi_diag.iter().chain(&cfg.r_xi_diag).all(|&w| w == 1.0);
    let s3 = 3f64.sqrt();
    writeln!(out, "analytic P1 = {s3:.6} I, P2 = 1.000000 I (unit weights: {unit})").unwrap();
    // General diagonal weights per axis: p12 = sqrt(q1 r), p11 = sqrt(q1 (q2 + 2 p12) / r) ...
    for axis in 0..2 {
        let (q1, q2, r) = (cfg.q_xi_diag[axis], cfg.q_xi_diag[axis + 2], cfg.r_xi_diag[axis]);
        let p12 = (q1 * r).sqrt();
        let p22 = (r * (q2 + 2.0 * p12)).sqrt();
        let p11 = p12 * p22 / r;
        writeln!(out, "axis {axis}: p11 = {p11:.6}, p12 = {p12:.6}, p22 = {p22:.6}").unwrap();
    }
}

/// Eigen-data of [[0, 1], [k1, k2]] by the quadratic formula; n1 is the
/// unit normal of the fast eigenvector (1, l_fast).
fn eta_gain(out: &mut String, cfg: &SynthesisConfig) {
    let (k1, k2) = (cfg.eta_gain.k1, cfg.eta_gain.k2);
    let disc = k2 * k2 + 4.0 * k1;
    writeln!(out, "K_eta = ({k1}, {k2})").unwrap();
    if disc <= 0.0 {
        writeln!(out, "complex eigenvalues (discriminant {disc})").unwrap();
        return;
    }
    let slow = 0.5 * (k2 + disc.sqrt());
    let fast = 0.5 * (k2 - disc.sqrt());
    let norm = (1.0 + fast * fast).sqrt();
    writeln!(out, "eigenvalues = {slow:.4}, {fast:.4}").unwrap();
    writeln!(out, "n1 = ({:.4}, {:.4})", -fast / norm, 1.0 / norm).unwrap();
}

/// g(p(0)) from the closed-form gravity vector.
fn gravity_offset(out: &mut String, params: &RobotParams, path: &PathSpec) {
    let p = path.value(path.theta1);
    let c12 = (p[0] + p[1]).cos();
    let g = [params.g1 * p[0].cos() + params.g2 * c12, params.g2 * c12];
    writeln!(out, "p(theta1) = ({:.6}, {:.6})", p[0], p[1]).unwrap();
    writeln!(out, "computed g(p(theta1)) = ({:.4}, {:.4})", g[0], g[1]).unwrap();
    writeln!(
        out,
        "printed offset        = ({:.1}, {:.1})",
        PRINTED_U_TILDE[0], PRINTED_U_TILDE[1]
    )
    .unwrap();
}

fn bounds(out: &mut String, cfg: &SynthesisConfig) -> Result<(), String> {
    let poly = build_eta_polytope(&cfg.eta_gain, cfg.path.theta0, cfg.thetadot_bar)
        .map_err(|e| e.to_string())?;
    let g = grid_maxima(
        &cfg.params,
        &cfg.path,
        &poly,
        &cfg.eta_gain,
        cfg.constraints.qdot_max,
        cfg.bound_options.grid_points,
    );
    let ts = synthesize(cfg).map_err(|e| e.to_string())?;
    let b = ts.bounds;
    writeln!(out, "quantity   grid max      bound").unwrap();
    for (n, gv, bv) in [
        ("||B||", g.b, b.b_bar),
        ("||C||", g.c, b.c_bar),
        ("||g||", g.g, b.g_bar),
        ("||pdot||", g.pdot, b.pdot_bar),
        ("||pddot||", g.pddot, b.pddot_bar),
    ] {
        writeln!(out, "{n:<10} {gv:<13.6} {bv:.6}").unwrap();
    }
    Ok(())
}

/// Input and velocity inequalities of the terminal controller at the
/// synthesized level.
fn inequalities(out: &mut String, cfg: &SynthesisConfig) -> Result<(), String> {
    let ts = synthesize(cfg).map_err(|e| e.to_string())?;
    let (b, c) = (ts.bounds, cfg.constraints);
    let numer = c.u_max - b.c_bar * c.qdot_max - b.g_bar - b.b_bar * b.pddot_bar;
    writeln!(
        out,
        "u_max - C_bar qdot_max - g_bar - B_bar pddot_bar = {numer:.4} (> 0: {})",
        numer > 0.0
    )
    .unwrap();
    let rq = c.qdot_max - b.pdot_bar;
    writeln!(out, "qdot_max - pdot_bar = {rq:.4} (> 0: {})", rq > 0.0).unwrap();
    let lr = ts.level_result;
    writeln!(out, "xi radius allowed by the input bound    = {:.6}", lr.xi_radius).unwrap();
    writeln!(out, "xi2 radius allowed by the velocity bound = {:.6}", lr.xi2_radius).unwrap();
    writeln!(out, "gamma = {:.6}, level = {:.6}", lr.gamma, lr.level()).unwrap();
    Ok(())
}
