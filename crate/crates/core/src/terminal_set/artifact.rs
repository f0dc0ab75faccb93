//! Versioned JSON file holding a synthesized terminal set.

use super::bounds::ModelBounds;
use super::level::{LevelResult, BISECTION_TOL};
use super::{care_residual, EtaPolytope, SynthesisConfig, TerminalSet};
use crate::transverse::{EtaGain, XiGain};
use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed artifact: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported artifact version {found} (expected {ARTIFACT_VERSION})")]
    Version { found: u32 },
    #[error("inconsistent artifact: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaPolytopeData {
    pub theta0: f64,
    pub thetadot_bar: f64,
    pub n1: [f64; 2],
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetadata {
    pub bisection_tol: f64,
    pub care_residual: f64,
    pub closed_loop_spectral_abscissa: f64,
    pub eta_eigenvalues: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub version: u32,
    /// Row-major.
    pub p_xi: [[f64; 4]; 4],
    pub k_xi: [[f64; 4]; 2],
    pub gamma: f64,
    pub level: f64,
    pub eta_gain: EtaGain,
    pub eta_polytope: EtaPolytopeData,
    pub bounds: ModelBounds,
    pub level_result: LevelResult,
    pub synthesis: SynthesisConfig,
    pub metadata: SynthesisMetadata,
}

fn rows<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> [[f64; C]; R] {
    let mut out = [[0.0; C]; R];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

impl Artifact {
    pub fn new(ts: &TerminalSet, cfg: &SynthesisConfig) -> Self {
        let q = Matrix4::from_diagonal(&Vector4::from(cfg.q_xi_diag));
        let r = Matrix2::from_diagonal(&Vector2::from(cfg.r_xi_diag));
        let (slow, fast) = ts.eta_gain.eigenvalues().unwrap_or((f64::NAN, f64::NAN));
        Self {
            version: ARTIFACT_VERSION,
            p_xi: rows(&ts.p_xi),
            k_xi: rows(&ts.xi_gain.k_xi),
            gamma: ts.level_result.gamma,
            level: ts.level,
            eta_gain: ts.eta_gain,
            eta_polytope: EtaPolytopeData {
                theta0: ts.eta_poly.theta0,
                thetadot_bar: ts.eta_poly.thetadot_bar,
                n1: ts.eta_poly.n1.into(),
                vertices: ts.eta_poly.vertices().iter().map(|v| [v[0], v[1]]).collect(),
            },
            bounds: ts.bounds,
            level_result: ts.level_result,
            synthesis: *cfg,
            metadata: SynthesisMetadata {
                bisection_tol: BISECTION_TOL,
                care_residual: care_residual(&ts.p_xi, &q, &r),
                closed_loop_spectral_abscissa: ts.xi_gain.spectral_abscissa(),
                eta_eigenvalues: [slow, fast],
            },
        }
    }

    pub fn terminal_set(&self) -> Result<TerminalSet, ArtifactError> {
        if self.version != ARTIFACT_VERSION {
            return Err(ArtifactError::Version {
                found: self.version,
            });
        }
        let p = Matrix4::from_fn(|i, j| self.p_xi[i][j]);
        let k = Matrix2x4::from_fn(|i, j| self.k_xi[i][j]);
        if (p - p.transpose()).amax() > 1e-12 || p.cholesky().is_none() {
            return Err(ArtifactError::Inconsistent(
                "P_xi must be symmetric positive definite".into(),
            ));
        }
        if !(self.level > 0.0) {
            return Err(ArtifactError::Inconsistent("level must be positive".into()));
        }
        Ok(TerminalSet {
            p_xi: p,
            level: self.level,
            eta_poly: EtaPolytope {
                theta0: self.eta_polytope.theta0,
                thetadot_bar: self.eta_polytope.thetadot_bar,
                n1: Vector2::from(self.eta_polytope.n1),
            },
            xi_gain: XiGain { k_xi: k, p_xi: p },
            eta_gain: self.eta_gain,
            bounds: self.bounds,
            level_result: self.level_result,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact is serializable");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        let io = |source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_json().as_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let a: Artifact = serde_json::from_str(&text)?;
        if a.version != ARTIFACT_VERSION {
            return Err(ArtifactError::Version { found: a.version });
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal_set::synthesize;

    #[test]
    fn round_trip_through_json() {
        let cfg = SynthesisConfig::default();
        let ts = synthesize(&cfg).unwrap();
        let a = Artifact::new(&ts, &cfg);
        let back: Artifact = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.terminal_set().unwrap(), ts);
        assert!(a.metadata.care_residual < 1e-8);
    }

    #[test]
    fn serialization_is_reproducible() {
        let cfg = SynthesisConfig::default();
        let a = Artifact::new(&synthesize(&cfg).unwrap(), &cfg).to_json();
        let b = Artifact::new(&synthesize(&cfg).unwrap(), &cfg).to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let cfg = SynthesisConfig::default();
        let mut a = Artifact::new(&synthesize(&cfg).unwrap(), &cfg);
        a.version = 99;
        assert!(matches!(a.terminal_set(), Err(ArtifactError::Version { found: 99 })));
    }
}
