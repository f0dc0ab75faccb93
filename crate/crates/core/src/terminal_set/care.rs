//! Continuous algebraic Riccati equation for the xi double integrator.
//!
//! Newton-Kleinman iteration; each step solves a 4x4 Lyapunov equation in
//! Kronecker form.

use super::SynthesisError;
use crate::transverse::{xi_system, XiGain};
use nalgebra::{Matrix2, Matrix2x4, Matrix4, SMatrix, SVector};

const MAX_ITER: usize = 50;
const STEP_TOL: f64 = 1e-14;

/// Spectral norm of the CARE residual A'P + PA - P B R^-1 B' P + Q.
pub fn care_residual(p: &Matrix4<f64>, q: &Matrix4<f64>, r: &Matrix2<f64>) -> f64 {
    let (a, b) = xi_system();
    let r_inv = r.try_inverse().unwrap_or_else(Matrix2::zeros);
    let res = a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q;
    spectral_norm(&res)
}

pub(crate) fn spectral_norm<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> f64 {
    nalgebra::DMatrix::from_column_slice(R, C, m.as_slice())
        .singular_values()
        .max()
}

/// Solves A'X + XA + M = 0 for symmetric X.
fn lyapunov(a: &Matrix4<f64>, m: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    // vec(A'X + XA) = (I kron A' + A' kron I) vec(X), column-major vec.
    let at = a.transpose();
    let mut k = SMatrix::<f64, 16, 16>::zeros();
    for i in 0..4 {
        for j in 0..4 {
            for r in 0..4 {
                for c in 0..4 {
                    // block (i, j) of I kron A' is delta_ij A'
                    if i == j {
                        k[(4 * i + r, 4 * j + c)] += at[(r, c)];
                    }
                    // block (i, j) of A' kron I is A'_ij I
                    if r == c {
                        k[(4 * i + r, 4 * j + c)] += at[(i, j)];
                    }
                }
            }
        }
    }
    let rhs = -SVector::<f64, 16>::from_column_slice(m.as_slice());
    let x = k.lu().solve(&rhs)?;
    let x = Matrix4::from_column_slice(x.as_slice());
    Some((x + x.transpose()) * 0.5)
}

/// Stabilizing CARE solution and the LQR gain K = R^-1 B' P.
pub fn solve_care(q: &Matrix4<f64>, r: &Matrix2<f64>) -> Result<XiGain, SynthesisError> {
    let sym_err = (q - q.transpose()).amax().max((r - r.transpose()).amax());
    if sym_err > 1e-12 {
        return Err(SynthesisError::InvalidWeights("Q and R must be symmetric".into()));
    }
    if q.symmetric_eigenvalues().min() < -1e-12 {
        return Err(SynthesisError::InvalidWeights("Q must be positive semidefinite".into()));
    }
    if r.symmetric_eigenvalues().min() <= 0.0 {
        return Err(SynthesisError::InvalidWeights("R must be positive definite".into()));
    }
    let r_inv = r.try_inverse().expect("positive definite R is invertible");
    let (a, b) = xi_system();
    // Any PD-derivative gain stabilizes the double integrator.
    let mut k = Matrix2x4::new(1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 2.0);
    let mut p = Matrix4::zeros();
    for _ in 0..MAX_ITER {
        let ac = a - b * k;
        let m = q + k.transpose() * r * k;
        let p_next = lyapunov(&ac, &m).ok_or(SynthesisError::RiccatiDiverged)?;
        if !p_next.iter().all(|v| v.is_finite()) {
            return Err(SynthesisError::RiccatiDiverged);
        }
        let step = (p_next - p).amax();
        p = p_next;
        k = r_inv * b.transpose() * p;
        if step <= STEP_TOL * (1.0 + p.amax()) {
            break;
        }
    }
    let gains = XiGain { k_xi: k, p_xi: p };
    if care_residual(&p, q, r) > 1e-8 || gains.spectral_abscissa() >= 0.0 {
        return Err(SynthesisError::RiccatiDiverged);
    }
    Ok(gains)
}
