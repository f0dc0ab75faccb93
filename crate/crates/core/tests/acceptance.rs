//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the target;
//! any other failure does. Runtime is dominated by the 15 s closed-loop runs.

use mpfc_core::checks;
use mpfc_core::config::{Config, Scenario};
use mpfc_core::dynamics::{AugmentedState, PathParamState, RobotState};
use mpfc_core::mpfc::{run, ClosedLoopLog, LoopContext, MpfcConfig, MpfcError, DESCENT_SLACK};
use mpfc_core::ocp::EndPenalty;
use mpfc_core::terminal_set::verify::verify_invariance;
use mpfc_core::terminal_set::{synthesize, TerminalSet};
use std::process::ExitCode;
use std::time::Instant;

/// With the printed weights the optimizer trades path progress against the
/// torque offset cost and the arm does not reach the path end within 15 s.
const KNOWN_RED: [u32; 2] = [2, 3];

const E_TOL: f64 = 1e-2;
const THETA_TOL: f64 = 1e-2;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: u32, name: &'static str, passed: bool, detail: String) {
    let tag = match (passed, KNOWN_RED.contains(&id)) {
        (true, _) => "PASS",
        (false, true) => "FAIL (known)",
        (false, false) => "FAIL",
    };
    println!("{tag} [{id}] {name}: {detail}");
    out.push(Outcome {
        id,
        name,
        passed,
        detail,
    });
}

/// Log of a run; an infeasible solve keeps the partial log.
fn closed_loop(ctx: &LoopContext, x0: &RobotState, z0: Option<PathParamState>) -> (ClosedLoopLog, Option<String>) {
    match run(x0, z0, ctx) {
        Ok(log) => (log, None),
        Err(MpfcError::Infeasible { k, t, log }) => (*log, Some(format!("infeasible at step {k}, t = {t}"))),
        Err(e) => (ClosedLoopLog::default(), Some(e.to_string())),
    }
}

struct PathRun {
    converged: bool,
    detail: String,
}

fn path_criterion(log: &ClosedLoopLog, err: &Option<String>) -> PathRun {
    let s = log.summary();
    let settled = log.settled_after(|r| r.e_norm < E_TOL);
    let converged = err.is_none()
        && settled.is_some()
        && s.final_theta.abs() < THETA_TOL
        && s.u_violations == 0
        && s.qdot_violations == 0
        && s.infeasible == 0;
    let detail = format!(
        "final |e| {:.3e}, e < {E_TOL} from {}, final theta {:.4}, u/qdot violations {}/{}, infeasible {}{}",
        s.final_e_norm,
        settled.map_or("never".into(), |t| format!("t = {t:.2}")),
        s.final_theta,
        s.u_violations,
        s.qdot_violations,
        s.infeasible,
        err.as_ref().map_or(String::new(), |e| format!(", {e}")),
    );
    PathRun { converged, detail }
}

/// Share of steps meeting the descent inequality when the value function
/// carries the end penalty E(t_k + T); E does not move the optimizer, so it
/// is added to the logged E = 0 values.
fn descent_fraction(log: &ClosedLoopLog, penalty: &EndPenalty, horizon: f64) -> f64 {
    let r = &log.records;
    let res = log.descent_residuals();
    if res.is_empty() {
        return 1.0;
    }
    let ok = res
        .iter()
        .enumerate()
        .filter(|&(k, d)| {
            let shift = penalty.value(r[k + 1].t + horizon) - penalty.value(r[k].t + horizon);
            d + shift <= DESCENT_SLACK
        })
        .count();
    ok as f64 / res.len() as f64
}

fn main() -> ExitCode {
    let cfg = Config::default();
    let syn = &cfg.synthesis;
    let mut out = Vec::new();

    let clock = Instant::now();
    let ts: TerminalSet = match synthesize(syn) {
        Ok(ts) => ts,
        Err(e) => {
            println!("FAIL [1] terminal set: synthesis failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let synth_time = clock.elapsed().as_secs_f64();
    let n1 = ts.eta_poly.n1;
    let p = ts.p_xi;
    let s3 = 3f64.sqrt();
    let mut p_err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let d = if i == j { 1.0 } else { 0.0 };
            p_err = p_err.max((p[(i, j)] - 1.73 * d).abs());
            p_err = p_err.max((p[(i, j + 2)] - d).abs());
        }
    }
    let level_rel = (ts.level - 3.13).abs() / 3.13;
    report(
        &mut out,
        1,
        "terminal set",
        (n1[0] - 0.78).abs() < 0.01
            && (n1[1] - 0.63).abs() < 0.01
            && p_err < 0.01
            && level_rel <= 0.1
            && synth_time < 60.0,
        format!(
            "n1 ({:.4}, {:.4}), P1 {:.4} I (sqrt 3 = {s3:.4}), max block error {p_err:.2e}, level {:.4} ({:.1}% from 3.13), {synth_time:.2} s",
            n1[0],
            n1[1],
            p[(0, 0)],
            ts.level,
            100.0 * level_rel
        ),
    );

    let opts = cfg.invariance;
    let inv = verify_invariance(&ts, &syn.params, &syn.path, &syn.constraints, &cfg.mpfc.weights, &opts);
    let mut inflated = ts.clone();
    inflated.level *= 10.0;
    let neg = verify_invariance(&inflated, &syn.params, &syn.path, &syn.constraints, &cfg.mpfc.weights, &opts);
    report(
        &mut out,
        4,
        "invariance certificate",
        opts.n_samples >= 500
            && opts.horizon >= 60.0
            && inv.containment_fraction == 1.0
            && inv.box_fraction == 1.0
            && inv.all_alpha_positive()
            && neg.containment_fraction < 1.0,
        format!(
            "{} samples over {} s: containment {:.3}, box {:.3}, min alpha {:.4}; 10x level containment {:.3}",
            opts.n_samples, opts.horizon, inv.containment_fraction, inv.box_fraction, inv.min_alpha,
            neg.containment_fraction
        ),
    );

    let reference = Scenario::reference();
    let ctx = reference.context(&cfg, ts.clone()).expect("reference scenario is valid");
    let x0 = AugmentedState::new(reference.robot_state(), reference.path_state().unwrap());
    let (c_bar, alpha) = (inv.c_bar, inv.alpha_lower);
    match checks::end_penalty_equivalence(&ctx, x0, 0.0, c_bar, alpha) {
        Ok(r) => report(
            &mut out,
            5,
            "end penalty equivalence",
            r.passed(1e-6, 1e-8),
            format!(
                "control difference {:.2e}, cost shift minus penalty {:.2e}, both converged {}",
                r.control_diff,
                r.cost_diff - r.penalty,
                r.both_converged
            ),
        ),
        Err(e) => report(&mut out, 5, "end penalty equivalence", false, e.to_string()),
    }

    let clock = Instant::now();
    let (ref_log, ref_err) = closed_loop(&ctx, &reference.robot_state(), reference.path_state());
    let ref_time = clock.elapsed().as_secs_f64();
    let r2 = path_criterion(&ref_log, &ref_err);
    report(
        &mut out,
        2,
        "reference closed loop",
        r2.converged,
        format!("{}, {ref_time:.0} s wall", r2.detail),
    );

    let mut all = r2.converged;
    let mut lines = vec![format!("reference: {}", if r2.converged { "ok" } else { "not converged" })];
    for sc in Scenario::multi_start().into_iter().skip(1) {
        let c = sc.context(&cfg, ts.clone()).expect("built-in scenario is valid");
        let (log, err) = closed_loop(&c, &sc.robot_state(), sc.path_state());
        let r = path_criterion(&log, &err);
        println!("      {}: {}", sc.name, r.detail);
        all &= r.converged;
        lines.push(format!("{}: {}", sc.name, if r.converged { "ok" } else { "not converged" }));
    }
    report(&mut out, 3, "multi-start convergence", all, lines.join(", "));

    let penalty = EndPenalty::Exponential {
        c_bar,
        alpha,
        t_origin: 0.0,
    };
    let with_e = descent_fraction(&ref_log, &penalty, ctx.cfg.horizon);
    let without_e = ref_log.summary().descent_fraction;
    report(
        &mut out,
        6,
        "descent along the reference run",
        ref_err.is_none() && with_e >= 0.99,
        format!(
            "fraction {:.4} with the exponential end penalty (c_bar {c_bar:.3e}, alpha {alpha:.4}), {:.4} with E = 0",
            with_e, without_e
        ),
    );

    let vcfg = MpfcConfig::velocity_assigned(0.2);
    let vctx = LoopContext::new(syn.params, syn.path, ts.clone(), vcfg).expect("velocity config is valid");
    let (vlog, verr) = closed_loop(&vctx, &reference.robot_state(), reference.path_state());
    let settled = vlog.settled_after(|r| (r.thetadot - 0.2).abs() < 1e-2 && r.e_norm < E_TOL);
    let vs = vlog.summary();
    let after = |t0: f64| {
        vlog.records
            .iter()
            .filter(|r| r.t >= t0)
            .fold((0.0f64, 0.0f64), |(a, b), r| (a.max((r.thetadot - 0.2).abs()), b.max(r.e_norm)))
    };
    let (dv, de) = after(settled.unwrap_or(f64::INFINITY));
    report(
        &mut out,
        7,
        "velocity-assigned mode",
        verr.is_none() && vs.infeasible == 0 && settled.is_some_and(|t| t <= 10.0),
        format!(
            "settled at {}, afterwards max |thetadot - 0.2| {dv:.2e}, max |e| {de:.2e}, backward steps {}, infeasible {}{}",
            settled.map_or("never".into(), |t| format!("t = {t:.2}")),
            vs.backward_steps,
            vs.infeasible,
            verr.map_or(String::new(), |e| format!(", {e}")),
        ),
    );

    let care = checks::care_check(&ts, syn);
    let qdot_max = syn.constraints.qdot_max;
    let phi = checks::phi_round_trip(&syn.path, qdot_max, 1000, 11);
    let field = checks::vector_field_consistency(&syn.params, &syn.path, qdot_max, syn.constraints.u_max, 200, 12);
    let order = checks::integrator_order(&syn.params, 0.01);
    let field_v = field.as_ref().map_or(f64::NAN, |v| *v);
    let order_v = order.as_ref().map_or(f64::NAN, |v| *v);
    report(
        &mut out,
        8,
        "numerical hygiene",
        care < 1e-8 && phi < 1e-12 && field_v < 1e-8 && (3.5..=4.5).contains(&order_v),
        format!("CARE residual {care:.2e}, round trip {phi:.2e}, vector field {field_v:.2e}, order {order_v:.3}"),
    );

    out.sort_by_key(|o| o.id);
    let unexpected: Vec<&Outcome> = out.iter().filter(|o| !o.passed && !KNOWN_RED.contains(&o.id)).collect();
    let fixed: Vec<&Outcome> = out.iter().filter(|o| o.passed && KNOWN_RED.contains(&o.id)).collect();
    println!();
    println!("summary: {}/{} criteria pass", out.iter().filter(|o| o.passed).count(), out.len());
    for o in &fixed {
        println!("note: [{}] {} passes although listed as known red", o.id, o.name);
    }
    for o in &unexpected {
        println!("unexpected failure: [{}] {}: {}", o.id, o.name, o.detail);
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
