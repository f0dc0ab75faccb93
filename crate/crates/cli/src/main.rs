//! `mpfc`: terminal-set synthesis, closed-loop simulation, verification and
//! reference values.
//!
//! Exit codes: 0 success, 1 infeasibility or abort, 2 verification failure,
//! 3 configuration error.

mod oracle;
mod output;

use clap::{Parser, Subcommand, ValueEnum};
use mpfc_core::checks;
use mpfc_core::config::{Config, Scenario, ScenarioFile, ScenarioMode};
use mpfc_core::dynamics::AugmentedState;
use mpfc_core::mpfc::{run, MpfcError};
use mpfc_core::terminal_set::{
    synthesize, verify_invariance, Artifact, InvarianceReport, TerminalSet,
};
use output::{write_csv, write_json, ScenarioSummary};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_ABORT: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "mpfc", version, about = "Model predictive path-following control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Path,
    Velocity,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the terminal set and write it as a JSON artifact.
    Synthesize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "terminal_set.json")]
        out: PathBuf,
    },
    /// Run closed-loop scenarios and write one CSV and summary per scenario.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario file; the reference start when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the mode of every scenario.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Path speed for velocity mode when a scenario has none.
        #[arg(long, default_value_t = 0.2)]
        thetadot_ref: f64,
        /// Overrides the simulated duration of every scenario (s).
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Check the terminal set and the numerical building blocks.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated time per Monte Carlo sample (s).
        #[arg(long)]
        horizon: Option<f64>,
        /// Multiplies the ellipsoid level before checking (negative control).
        #[arg(long, default_value_t = 1.0)]
        inflate_level: f64,
        /// Machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print independent reference values.
    Oracle {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(oracle::NAMES))]
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn config_error(msg: impl ToString) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        msg: msg.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::read(p).map_err(config_error),
        None => Ok(Config::default()),
    }
}

fn load_terminal_set(path: &Path) -> Result<TerminalSet, Failure> {
    Artifact::read(path)
        .and_then(|a| a.terminal_set())
        .map_err(config_error)
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MPFC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_error(format!("MPFC_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| config_error(e.to_string()))
}

fn cmd_synthesize(config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ts = synthesize(&cfg.synthesis).map_err(|e| Failure {
        code: EXIT_ABORT,
        msg: format!("synthesis failed: {e}"),
    })?;
    let art = Artifact::new(&ts, &cfg.synthesis);
    art.write(out).map_err(|e| Failure {
        code: EXIT_ABORT,
        msg: e.to_string(),
    })?;
    let p = &ts.p_xi;
    println!("gamma   = {:.6}", art.gamma);
    println!("gamma^2 = {:.6}", art.level);
    println!("n1      = ({:.4}, {:.4})", ts.eta_poly.n1[0], ts.eta_poly.n1[1]);
    println!("P1      = [[{:.4}, {:.4}], [{:.4}, {:.4}]]", p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)]);
    println!("P2      = [[{:.4}, {:.4}], [{:.4}, {:.4}]]", p[(0, 2)], p[(0, 3)], p[(1, 2)], p[(1, 3)]);
    println!("P3      = [[{:.4}, {:.4}], [{:.4}, {:.4}]]", p[(2, 2)], p[(2, 3)], p[(3, 2)], p[(3, 3)]);
    println!("wrote {}", out.display());
    Ok(())
}

struct SimulateArgs<'a> {
    config: Option<&'a Path>,
    scenario: Option<&'a Path>,
    artifact: &'a Path,
    out: &'a Path,
    mode: Option<ModeArg>,
    thetadot_ref: f64,
    t_end: Option<f64>,
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config)?;
    let mut scenarios = match a.scenario {
        Some(p) => ScenarioFile::read(p).map_err(config_error)?.scenarios,
        None => vec![Scenario::reference()],
    };
    for s in &mut scenarios {
        match a.mode {
            Some(ModeArg::Path) => {
                s.mode = ScenarioMode::Path;
                s.thetadot_ref = None;
            }
            Some(ModeArg::Velocity) => s.mode = ScenarioMode::Velocity,
            None => {}
        }
        if s.mode == ScenarioMode::Velocity && s.thetadot_ref.is_none() {
            s.thetadot_ref = Some(a.thetadot_ref);
        }
        if a.t_end.is_some() {
            s.t_end = a.t_end;
        }
    }
    let ts = load_terminal_set(a.artifact)?;
    let contexts = scenarios
        .iter()
        .map(|s| s.context(&cfg, ts.clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_error)?;
    fs::create_dir_all(a.out).map_err(|e| config_error(format!("{}: {e}", a.out.display())))?;
    let pool = thread_pool()?;
    let results: Vec<_> = pool.install(|| {
        scenarios
            .par_iter()
            .zip(contexts.par_iter())
            .map(|(s, ctx)| run(&s.robot_state(), s.path_state(), ctx))
            .collect()
    });
    let mut failed = false;
    let mut summaries = Vec::new();
    for (s, res) in scenarios.iter().zip(results) {
        let (log, outcome, error) = match res {
            Ok(log) => (Some(log), "completed", None),
            Err(MpfcError::Infeasible { log, .. }) => {
                let e = format!("infeasible at t = {:.3}", log.records.last().map_or(0.0, |r| r.t));
                (Some(*log), "infeasible", Some(e))
            }
            Err(e) => (None, "aborted", Some(e.to_string())),
        };
        failed |= error.is_some();
        let summary = log.as_ref().map(|l| l.summary());
        if let Some(l) = &log {
            let path = a.out.join(format!("{}.csv", s.name));
            write_csv(&path, l).map_err(|e| Failure {
                code: EXIT_ABORT,
                msg: format!("{}: {e}", path.display()),
            })?;
        }
        let entry = ScenarioSummary {
            name: s.name.clone(),
            outcome: outcome.to_string(),
            error,
            summary,
        };
        let path = a.out.join(format!("{}.summary.json", s.name));
        write_json(&path, &entry).map_err(|e| Failure {
            code: EXIT_ABORT,
            msg: format!("{}: {e}", path.display()),
        })?;
        match &entry.summary {
            Some(m) => println!(
                "{:<12} {:<10} final |e| {:.3e}  theta {:.4}  thetadot {:.4}  u/qdot violations {}/{}  not converged {}  mean solve {:.1} ms",
                s.name,
                outcome,
                m.final_e_norm,
                m.final_theta,
                m.final_thetadot,
                m.u_violations,
                m.qdot_violations,
                m.not_converged,
                m.mean_solve_time * 1e3
            ),
            None => println!("{:<12} {outcome}: {}", s.name, entry.error.as_deref().unwrap_or("")),
        }
        summaries.push(entry);
    }
    write_json(&a.out.join("summary.json"), &summaries).map_err(|e| Failure {
        code: EXIT_ABORT,
        msg: e.to_string(),
    })?;
    if failed {
        return Err(Failure {
            code: EXIT_ABORT,
            msg: "at least one scenario did not complete".into(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckLine {
    name: &'static str,
    passed: bool,
    value: f64,
    limit: String,
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    level: f64,
    checks: Vec<CheckLine>,
    end_penalty: Option<checks::EndPenaltyReport>,
    bound_audit: checks::BoundAudit,
    invariance: InvarianceReport,
}

struct VerifyArgs<'a> {
    config: Option<&'a Path>,
    artifact: &'a Path,
    samples: Option<usize>,
    seed: Option<u64>,
    horizon: Option<f64>,
    inflate_level: f64,
    out: Option<&'a Path>,
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config)?;
    let mut ts = load_terminal_set(a.artifact)?;
    if !(a.inflate_level > 0.0 && a.inflate_level.is_finite()) {
        return Err(config_error("--inflate-level must be positive"));
    }
    ts.level *= a.inflate_level;
    let mut opts = cfg.invariance;
    opts.n_samples = a.samples.unwrap_or(opts.n_samples);
    opts.seed = a.seed.unwrap_or(opts.seed);
    opts.horizon = a.horizon.unwrap_or(opts.horizon);
    if opts.n_samples == 0 || !(opts.horizon > 0.0) {
        return Err(config_error("need at least one sample and a positive horizon"));
    }
    let syn = &cfg.synthesis;
    let pool = thread_pool()?;
    let inv = pool.install(|| {
        verify_invariance(&ts, &syn.params, &syn.path, &syn.constraints, &cfg.mpfc.weights, &opts)
    });
    let mut lines = vec![
        CheckLine {
            name: "containment",
            passed: inv.containment_fraction == 1.0,
            value: inv.containment_fraction,
            limit: "== 1".into(),
        },
        CheckLine {
            name: "box constraints",
            passed: inv.box_fraction == 1.0,
            value: inv.box_fraction,
            limit: "== 1".into(),
        },
        CheckLine {
            name: "decay rates positive",
            passed: inv.all_alpha_positive(),
            value: inv.min_alpha,
            limit: "> 0".into(),
        },
        CheckLine {
            name: "end penalty decrease",
            passed: inv.max_decrease_residual <= 1e-6,
            value: inv.max_decrease_residual,
            limit: "<= 1e-6".into(),
        },
    ];
    // The end-penalty equivalence holds for any positive constants; use the
    // certified ones when available.
    let (c_bar, alpha) = if inv.alpha_lower.is_finite() && inv.alpha_lower > 0.0 && inv.c_bar > 0.0 {
        (inv.c_bar, inv.alpha_lower)
    } else {
        (1.0, 1.0)
    };
    let reference = Scenario::reference();
    let end_penalty = reference
        .context(&cfg, ts.clone())
        .ok()
        .and_then(|ctx| {
            let x0 = AugmentedState::new(reference.robot_state(), reference.path_state()?);
            checks::end_penalty_equivalence(&ctx, x0, 0.0, c_bar, alpha).ok()
        });
    lines.push(CheckLine {
        name: "end penalty equivalence",
        passed: end_penalty.is_some_and(|r| r.passed(1e-6, 1e-8)),
        value: end_penalty.map_or(f64::NAN, |r| r.control_diff),
        limit: "< 1e-6 (cost shift within 1e-8)".into(),
    });
    let audit = checks::audit_bounds(&ts, syn, syn.bound_options.grid_points);
    lines.push(CheckLine {
        name: "bounds dominate grid",
        passed: audit.ok,
        value: audit.grid.pddot / audit.bounds.pddot_bar,
        limit: "grid <= bound".into(),
    });
    let care = checks::care_check(&ts, syn);
    lines.push(CheckLine {
        name: "CARE residual",
        passed: care < 1e-8,
        value: care,
        limit: "< 1e-8".into(),
    });
    let seed = opts.seed;
    let rt = checks::phi_round_trip(&syn.path, syn.constraints.qdot_max, 1000, seed);
    lines.push(CheckLine {
        name: "coordinate round trip",
        passed: rt < 1e-12,
        value: rt,
        limit: "< 1e-12".into(),
    });
    let vf = checks::vector_field_consistency(
        &syn.params,
        &syn.path,
        syn.constraints.qdot_max,
        syn.constraints.u_max,
        200,
        seed,
    )
    .unwrap_or(f64::INFINITY);
    lines.push(CheckLine {
        name: "vector field consistency",
        passed: vf < 1e-8,
        value: vf,
        limit: "< 1e-8".into(),
    });
    let order = checks::integrator_order(&syn.params, 0.01).unwrap_or(f64::NAN);
    lines.push(CheckLine {
        name: "integrator order",
        passed: (3.5..=4.5).contains(&order),
        value: order,
        limit: "in [3.5, 4.5]".into(),
    });
    let passed = lines.iter().all(|l| l.passed);
    println!("level {:.6} ({} samples, horizon {} s, seed {})", ts.level, opts.n_samples, opts.horizon, opts.seed);
    for l in &lines {
        println!(
            "{} {:<26} {:<12.6e} {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            l.value,
            l.limit
        );
    }
    println!(
        "fitted decay rates: min {:.4}, certified {:.4}, c_bar {:.4e}",
        inv.min_alpha, inv.alpha_lower, inv.c_bar
    );
    if let Some(path) = a.out {
        let report = VerifyReport {
            passed,
            level: ts.level,
            checks: lines,
            end_penalty,
            bound_audit: audit,
            invariance: inv,
        };
        write_json(path, &report).map_err(|e| Failure {
            code: EXIT_ABORT,
            msg: format!("{}: {e}", path.display()),
        })?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: "verification failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Synthesize { config, out } => cmd_synthesize(config.as_deref(), out),
        Command::Simulate {
            config,
            scenario,
            artifact,
            out,
            mode,
            thetadot_ref,
            t_end,
        } => cmd_simulate(SimulateArgs {
            config: config.as_deref(),
            scenario: scenario.as_deref(),
            artifact,
            out,
            mode: *mode,
            thetadot_ref: *thetadot_ref,
            t_end: *t_end,
        }),
        Command::Verify {
            config,
            artifact,
            samples,
            seed,
            horizon,
            inflate_level,
            out,
        } => cmd_verify(VerifyArgs {
            config: config.as_deref(),
            artifact,
            samples: *samples,
            seed: *seed,
            horizon: *horizon,
            inflate_level: *inflate_level,
            out: out.as_deref(),
        }),
        Command::Oracle { name, config } => load_config(config.as_deref()).and_then(|cfg| {
            oracle::render(name, &cfg.synthesis)
                .map(|s| print!("{s}"))
                .map_err(|e| Failure {
                    code: EXIT_ABORT,
                    msg: e,
                })
        }),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
