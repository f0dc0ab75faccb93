//! Monte Carlo check that the terminal set is invariant under the terminal
//! controller and that the stage cost decays exponentially along it.

use super::TerminalSet;
use crate::dynamics::{rk4_step, AugmentedState, ConstraintSet, PathSpec, RobotParams};
use crate::ocp::cost::{stage_cost_at, CostWeights, Mode};
use crate::transverse::{
    from_transverse, terminal_u, terminal_v, to_transverse, TransverseCoords,
};
use nalgebra::{Vector2, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Numerical slack on the membership and box tests.
pub const CONTAINMENT_TOL: f64 = 1e-9;
/// Costs below this are excluded from the decay fit.
const FIT_FLOOR: f64 = 1e-250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOptions {
    pub n_samples: usize,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for InvarianceOptions {
    fn default() -> Self {
        Self {
            n_samples: 500,
            horizon: 60.0,
            step: 0.01,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub initial: [f64; 6],
    /// Stayed in E with the terminal input and the joint velocity inside
    /// their boxes at every step.
    pub contained: bool,
    pub first_exit: Option<f64>,
    /// max over time of ||u_E||inf / u_max
    pub u_ratio: f64,
    /// max over time of ||qdot||inf / qdot_max
    pub qdot_ratio: f64,
    pub min_eta2: f64,
    /// Fitted decay rate of F; +inf when F is identically zero.
    pub alpha: f64,
    pub final_eta_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n_samples: usize,
    pub horizon: f64,
    pub seed: u64,
    pub level: f64,
    pub containment_fraction: f64,
    pub box_fraction: f64,
    pub max_box_violation: f64,
    pub min_alpha: f64,
    pub alpha_lower: f64,
    pub c_bar: f64,
    /// max over samples and times of dE/dt + F with E = c_bar / alpha_lower exp(-alpha_lower t)
    pub max_decrease_residual: f64,
    pub min_eta2: f64,
    pub max_final_eta_ratio: f64,
    pub samples: Vec<SampleOutcome>,
}

impl InvarianceReport {
    pub fn all_alpha_positive(&self) -> bool {
        self.samples.iter().all(|s| s.alpha > 0.0)
    }

    pub fn passed(&self) -> bool {
        self.containment_fraction == 1.0
            && self.box_fraction == 1.0
            && self.all_alpha_positive()
            && self.max_decrease_residual <= 1e-6
            && self.min_eta2 >= -1e-9
    }
}

/// Draws initial states uniformly from the ellipsoid times the polytope.
pub fn sample_terminal_set(ts: &TerminalSet, path: &PathSpec, n: usize, seed: u64) -> Vec<AugmentedState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_inv_t = ts
        .p_xi
        .cholesky()
        .expect("P is positive definite")
        .l()
        .try_inverse()
        .expect("Cholesky factor is invertible")
        .transpose();
    let gamma = ts.level.sqrt();
    let poly = &ts.eta_poly;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let y = loop {
            let y = Vector4::from_fn(|_, _| rng.random_range(-1.0..=1.0));
            if y.norm_squared() <= 1.0 {
                break y;
            }
        };
        let eta = loop {
            let eta = Vector2::new(
                rng.random_range(poly.theta0..=0.0),
                rng.random_range(0.0..=poly.thetadot_bar),
            );
            if poly.contains(&eta, 0.0) {
                break eta;
            }
        };
        let xi = l_inv_t * y * gamma;
        out.push(from_transverse(&TransverseCoords::from_parts(&xi, &eta), path));
    }
    out
}

struct Trace {
    outcome: SampleOutcome,
    times: Vec<f64>,
    costs: Vec<f64>,
}

fn simulate_sample(
    s0: &AugmentedState,
    ts: &TerminalSet,
    params: &RobotParams,
    path: &PathSpec,
    constraints: &ConstraintSet,
    weights: &CostWeights,
    opts: &InvarianceOptions,
) -> Trace {
    let controls = |x: &Vector6<f64>| {
        let s = AugmentedState::from_vector(x);
        let c = to_transverse(&s, path);
        let v = terminal_v(&c.eta, &ts.eta_gain);
        let u = terminal_u(&c, &ts.xi_gain, &ts.eta_gain, params, path);
        (s, u, v)
    };
    let n = (opts.horizon / opts.step).round() as usize;
    let mut x = s0.to_vector();
    let mut times = Vec::with_capacity(n + 1);
    let mut costs = Vec::with_capacity(n + 1);
    let eta0 = Vector2::new(x[4], x[5]).norm();
    let mut out = SampleOutcome {
        initial: x.into(),
        contained: true,
        first_exit: None,
        u_ratio: 0.0,
        qdot_ratio: 0.0,
        min_eta2: f64::INFINITY,
        alpha: f64::INFINITY,
        final_eta_ratio: 0.0,
    };
    for k in 0..=n {
        let t = k as f64 * opts.step;
        let (s, u, v) = controls(&x);
        let u_ratio = u.amax() / constraints.u_max;
        let qdot_ratio = s.x.qdot.amax() / constraints.qdot_max;
        out.u_ratio = out.u_ratio.max(u_ratio);
        out.qdot_ratio = out.qdot_ratio.max(qdot_ratio);
        out.min_eta2 = out.min_eta2.min(s.z.thetadot);
        // E has to be admissible as well as invariant: the unsaturated law
        // keeps xi in any level set, so a too-large level shows up as a box
        // violation along the way.
        let inside = ts.membership(&s, path).margin() >= -CONTAINMENT_TOL
            && u_ratio <= 1.0 + CONTAINMENT_TOL
            && qdot_ratio <= 1.0 + CONTAINMENT_TOL;
        if !inside && out.contained {
            out.contained = false;
            out.first_exit = Some(t);
        }
        times.push(t);
        costs.push(stage_cost_at(&s, &u, v, weights, &Mode::PathFollowing, path));
        if k == n {
            break;
        }
        // The plant sees the saturated input.
        let step = rk4_step(
            &mut |y: &Vector6<f64>| {
                let (_, u, v) = controls(y);
                let u = u.map(|ui| ui.clamp(-constraints.u_max, constraints.u_max));
                crate::dynamics::augmented_rhs_vec(y, &u, v, params)
            },
            &x,
            opts.step,
        );
        match step {
            Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
            _ => {
                out.contained = false;
                out.first_exit.get_or_insert(t);
                break;
            }
        }
    }
    out.final_eta_ratio = if eta0 > 0.0 {
        Vector2::new(x[4], x[5]).norm() / eta0
    } else {
        0.0
    };
    out.alpha = fit_decay_rate(&times, &costs);
    Trace {
        outcome: out,
        times,
        costs,
    }
}

/// Least-squares slope of log F against t, negated.
pub fn fit_decay_rate(times: &[f64], costs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(costs)
        .filter(|(_, &f)| f > FIT_FLOOR)
        .map(|(&t, &f)| (t, f.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    -sxy / sxx
}

pub fn verify_invariance(
    ts: &TerminalSet,
    params: &RobotParams,
    path: &PathSpec,
    constraints: &ConstraintSet,
    weights: &CostWeights,
    opts: &InvarianceOptions,
) -> InvarianceReport {
    assert!(opts.n_samples >= 1, "need at least one sample");
    let starts = sample_terminal_set(ts, path, opts.n_samples, opts.seed);
    let traces: Vec<Trace> = starts
        .par_iter()
        .map(|s| simulate_sample(s, ts, params, path, constraints, weights, opts))
        .collect();
    let n = traces.len() as f64;
    let samples: Vec<SampleOutcome> = traces.iter().map(|t| t.outcome).collect();
    let contained = samples.iter().filter(|s| s.contained).count() as f64;
    let box_ok = samples
        .iter()
        .filter(|s| s.u_ratio <= 1.0 + CONTAINMENT_TOL && s.qdot_ratio <= 1.0 + CONTAINMENT_TOL)
        .count() as f64;
    let max_box_violation = samples
        .iter()
        .map(|s| (s.u_ratio - 1.0).max(s.qdot_ratio - 1.0).max(0.0))
        .fold(0.0, f64::max);
    let min_alpha = samples.iter().map(|s| s.alpha).fold(f64::INFINITY, f64::min);
    let alpha_lower = 0.9 * min_alpha;
    let (c_bar, residual) = if alpha_lower.is_finite() && alpha_lower > 0.0 {
        let c_bar = traces
            .iter()
            .flat_map(|tr| {
                tr.times
                    .iter()
                    .zip(&tr.costs)
                    .map(|(&t, &f)| f * (alpha_lower * t).exp())
            })
            .fold(0.0, f64::max);
        let residual = traces
            .iter()
            .flat_map(|tr| {
                tr.times
                    .iter()
                    .zip(&tr.costs)
                    .map(|(&t, &f)| f - c_bar * (-alpha_lower * t).exp())
            })
            .fold(f64::NEG_INFINITY, f64::max);
        (c_bar, residual)
    } else {
        (0.0, f64::INFINITY)
    };
    InvarianceReport {
        n_samples: opts.n_samples,
        horizon: opts.horizon,
        seed: opts.seed,
        level: ts.level,
        containment_fraction: contained / n,
        box_fraction: box_ok / n,
        max_box_violation,
        min_alpha,
        alpha_lower,
        c_bar,
        max_decrease_residual: residual,
        min_eta2: samples.iter().map(|s| s.min_eta2).fold(f64::INFINITY, f64::min),
        max_final_eta_ratio: samples.iter().map(|s| s.final_eta_ratio).fold(0.0, f64::max),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal_set::{synthesize, SynthesisConfig};

    #[test]
    fn samples_lie_in_the_set() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let path = PathSpec::default();
        for s in sample_terminal_set(&ts, &path, 200, 3) {
            assert!(ts.membership(&s, &path).margin() >= -1e-12);
        }
    }

    #[test]
    fn path_end_equilibrium_has_zero_cost() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let path = PathSpec::default();
        let s0 = from_transverse(&TransverseCoords::from_vector(&Vector6::zeros()), &path);
        let tr = simulate_sample(
            &s0,
            &ts,
            &RobotParams::default(),
            &path,
            &ConstraintSet::default(),
            &CostWeights::default(),
            &InvarianceOptions {
                horizon: 5.0,
                ..InvarianceOptions::default()
            },
        );
        assert!(tr.outcome.contained);
        assert!(tr.costs.iter().all(|&f| f < 1e-20), "{:?}", &tr.costs[..3]);
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..100).map(|k| 0.1 * k as f64).collect();
        let f: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        assert!((fit_decay_rate(&t, &f) - 0.7).abs() < 1e-12);
        assert_eq!(fit_decay_rate(&t, &vec![0.0; 100]), f64::INFINITY);
    }

    #[test]
    fn small_run_passes_and_is_deterministic() {
        let ts = synthesize(&SynthesisConfig::default()).unwrap();
        let opts = InvarianceOptions {
            n_samples: 16,
            horizon: 20.0,
            ..InvarianceOptions::default()
        };
        let run = || {
            verify_invariance(
                &ts,
                &RobotParams::default(),
                &PathSpec::default(),
                &ConstraintSet::default(),
                &CostWeights::default(),
                &opts,
            )
        };
        let a = run();
        assert!(a.passed(), "{a:?}");
        assert_eq!(a, run());
    }

    #[test]
    fn inflated_level_fails_containment() {
        let mut ts = synthesize(&SynthesisConfig::default()).unwrap();
        ts.level *= 10.0;
        let opts = InvarianceOptions {
            n_samples: 200,
            horizon: 10.0,
            ..InvarianceOptions::default()
        };
        let r = verify_invariance(
            &ts,
            &RobotParams::default(),
            &PathSpec::default(),
            &ConstraintSet::default(),
            &CostWeights::default(),
            &opts,
        );
        assert!(r.containment_fraction < 1.0, "{}", r.containment_fraction);
        assert!(!r.passed());
    }
}
