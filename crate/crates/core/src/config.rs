//! Versioned run configuration and closed-loop scenarios (JSON).

use crate::dynamics::{ConstraintSet, PathParamConstraint, PathParamState, RobotState};
use crate::mpfc::{LoopContext, MpfcConfig, SPEED_ERROR_WEIGHT};
use crate::ocp::{CostWeights, Mode};
use crate::terminal_set::{InvarianceOptions, SynthesisConfig, TerminalSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {what}: {source}")]
    Json {
        what: &'static str,
        source: serde_json::Error,
    },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("invalid {what}: {msg}")]
    Invalid { what: String, msg: String },
}

fn invalid(what: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        what: what.into(),
        msg: msg.into(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Json { what, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub synthesis: SynthesisConfig,
    pub mpfc: MpfcConfig,
    pub invariance: InvarianceOptions,
    /// Weight on the speed error for velocity-mode scenarios without their
    /// own weights.
    pub speed_error_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            synthesis: SynthesisConfig::default(),
            mpfc: MpfcConfig::default(),
            invariance: InvarianceOptions::default(),
            speed_error_weight: SPEED_ERROR_WEIGHT,
        }
    }
}

impl Config {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let c: Config = read_json(path, "config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version {
                what: "config",
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        if !(self.speed_error_weight > 0.0 && self.speed_error_weight.is_finite()) {
            return Err(invalid("config.speed_error_weight", "must be positive"));
        }
        if self.invariance.n_samples == 0 || !(self.invariance.horizon > 0.0) || !(self.invariance.step > 0.0) {
            return Err(invalid("config.invariance", "need samples, horizon and step positive"));
        }
        Ok(())
    }

    /// Checks that the closed-loop part is usable with terminal sets
    /// synthesized from this config.
    pub fn validate_loop(&self) -> Result<(), ConfigError> {
        self.validate()?;
        self.mpfc
            .validate()
            .map_err(|e| invalid("config.mpfc", e.to_string()))?;
        self.mpfc
            .weights
            .validate()
            .map_err(|e| invalid("config.mpfc.weights", e))?;
        let (a, b) = (&self.mpfc.constraints, &self.synthesis.constraints);
        if a.u_max != b.u_max || a.qdot_max != b.qdot_max || a.v_min != b.v_min || a.v_max != b.v_max {
            return Err(invalid(
                "config",
                "mpfc.constraints and synthesis.constraints must share their bounds",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config is serializable");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    #[default]
    Path,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// (q1, q2, qdot1, qdot2)
    pub x0: [f64; 4],
    /// (theta, thetadot); the closest path point is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<[f64; 2]>,
    #[serde(default)]
    pub mode: ScenarioMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetadot_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<CostWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

impl Scenario {
    pub fn new(name: &str, x0: [f64; 4], z0: Option<[f64; 2]>) -> Self {
        Self {
            name: name.to_string(),
            x0,
            z0,
            mode: ScenarioMode::Path,
            thetadot_ref: None,
            weights: None,
            constraints: None,
            horizon: None,
            intervals: None,
            t_end: None,
        }
    }

    pub fn robot_state(&self) -> RobotState {
        let [a, b, c, d] = self.x0;
        RobotState::new(a, b, c, d)
    }

    pub fn path_state(&self) -> Option<PathParamState> {
        self.z0.map(|[t, td]| PathParamState::new(t, td))
    }

    /// Loop configuration: `base` with this scenario's mode and overrides.
    pub fn loop_config(&self, cfg: &Config) -> Result<MpfcConfig, ConfigError> {
        let what = || format!("scenario {}", self.name);
        let mut m = cfg.mpfc;
        match self.mode {
            ScenarioMode::Path => {
                if self.thetadot_ref.is_some() {
                    return Err(invalid(what(), "thetadot_ref is only meaningful in velocity mode"));
                }
                m.mode = Mode::PathFollowing;
                m.constraints.z_set = PathParamConstraint::Bounded;
            }
            ScenarioMode::Velocity => {
                let r = self
                    .thetadot_ref
                    .ok_or_else(|| invalid(what(), "velocity mode needs thetadot_ref"))?;
                if !r.is_finite() {
                    return Err(invalid(what(), "thetadot_ref must be finite"));
                }
                m.mode = Mode::VelocityAssigned { thetadot_ref: r };
                m.constraints.z_set = PathParamConstraint::Free;
                m.weights.q_diag[4] = cfg.speed_error_weight;
            }
        }
        if let Some(w) = self.weights {
            w.validate().map_err(|e| invalid(what(), e))?;
            m.weights = w;
        }
        if let Some(c) = self.constraints {
            m.constraints = ConstraintSet {
                z_set: m.constraints.z_set,
                ..c
            };
        }
        if let Some(h) = self.horizon {
            m.horizon = h;
        }
        if let Some(n) = self.intervals {
            m.intervals = n;
        }
        if let Some(t) = self.t_end {
            m.t_end = t;
        }
        m.validate().map_err(|e| invalid(what(), e.to_string()))?;
        Ok(m)
    }

    /// Checks the initial state against the boxes of `cfg`.
    pub fn validate(&self, cfg: &Config) -> Result<MpfcConfig, ConfigError> {
        let what = || format!("scenario {}", self.name);
        cfg.validate_loop()?;
        let m = self.loop_config(cfg)?;
        if self.x0.iter().chain(self.z0.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(invalid(what(), "initial state must be finite"));
        }
        let x = self.robot_state();
        if !m.constraints.velocity_ok(&x.qdot) {
            return Err(invalid(what(), "initial joint velocity outside the box"));
        }
        if let Some(z) = self.path_state() {
            if !m.constraints.z_ok(&z, &cfg.synthesis.path) {
                return Err(invalid(what(), "initial path parameter state outside Z"));
            }
        }
        Ok(m)
    }

    pub fn context(&self, cfg: &Config, terminal: TerminalSet) -> Result<LoopContext, ConfigError> {
        let m = self.validate(cfg)?;
        LoopContext::new(cfg.synthesis.params, cfg.synthesis.path, terminal, m)
            .map_err(|e| invalid(format!("scenario {}", self.name), e.to_string()))
    }

    /// The worked example: start off the path with the path parameter at the
    /// path start.
    pub fn reference() -> Self {
        Self::new("reference", [-5.86, 2.43, 0.0, 0.0], Some([-5.3, 0.0]))
    }

    /// Starts spread around the beginning of the path, including one moving
    /// start; the path parameter is initialized from the closest path point.
    pub fn multi_start() -> Vec<Self> {
        let mut v = vec![Self::reference()];
        let starts = [
            ("above", [-5.6, 2.9, 0.0, 0.0]),
            ("below", [-6.1, 2.0, 0.0, 0.0]),
            ("ahead", [-5.2, 1.9, 0.0, 0.0]),
            ("moving", [-5.9, 2.6, 0.5, -0.5]),
        ];
        v.extend(starts.iter().map(|(n, x)| Self::new(n, *x, None)));
        v
    }

    /// Velocity assignment along the unconstrained path from the reference start.
    pub fn velocity(thetadot_ref: f64) -> Self {
        Self {
            name: "velocity".into(),
            mode: ScenarioMode::Velocity,
            thetadot_ref: Some(thetadot_ref),
            ..Self::reference()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn new(scenarios: Vec<Scenario>) -> Self {
        Self {
            version: SCENARIO_VERSION,
            scenarios,
        }
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let f: ScenarioFile = read_json(path, "scenario file")?;
        if f.version != SCENARIO_VERSION {
            return Err(ConfigError::Version {
                what: "scenario file",
                found: f.version,
                expected: SCENARIO_VERSION,
            });
        }
        if f.scenarios.is_empty() {
            return Err(invalid("scenario file", "no scenarios"));
        }
        let mut names: Vec<&str> = f.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("scenario file", "scenario names must be unique"));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenarios are serializable");
        s.push('\n');
        s
    }
}
