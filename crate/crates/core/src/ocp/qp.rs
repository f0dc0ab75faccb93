//! Box-constrained convex QP with a banded Hessian:
//! minimize g'd + d'Hd/2 subject to lo <= d <= hi.
//!
//! Projected Newton on the free variables with a projected Armijo search on
//! the quadratic itself.

use super::banded::SymBand;

const MAX_ITER: usize = 100;
const ARMIJO: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BoxQpResult {
    pub d: Vec<f64>,
    pub iterations: usize,
    /// False if a free-variable Hessian failed to factorize.
    pub ok: bool,
}

fn model(h: &SymBand, g: &[f64], d: &[f64]) -> f64 {
    let hd = h.mul_vec(d);
    d.iter().zip(g).zip(&hd).map(|((di, gi), hi)| di * (gi + 0.5 * hi)).sum()
}

pub fn solve_box_qp(h: &SymBand, g: &[f64], lo: &[f64], hi: &[f64], tol: f64) -> BoxQpResult {
    let n = g.len();
    let mut d: Vec<f64> = (0..n).map(|k| 0f64.clamp(lo[k], hi[k])).collect();
    let mut q = model(h, g, &d);
    for it in 0..MAX_ITER {
        let hd = h.mul_vec(&d);
        let grad: Vec<f64> = (0..n).map(|k| g[k] + hd[k]).collect();
        let clamped: Vec<bool> = (0..n)
            .map(|k| (d[k] <= lo[k] && grad[k] > 0.0) || (d[k] >= hi[k] && grad[k] < 0.0))
            .collect();
        let free_norm = (0..n)
            .filter(|&k| !clamped[k])
            .fold(0.0f64, |a, k| a.max(grad[k].abs()));
        if free_norm <= tol {
            return BoxQpResult {
                d,
                iterations: it,
                ok: true,
            };
        }
        let mut hf = h.clone();
        for k in 0..n {
            if clamped[k] {
                hf.pin(k);
            }
        }
        let Some(chol) = hf.cholesky() else {
            return BoxQpResult {
                d,
                iterations: it,
                ok: false,
            };
        };
        let rhs: Vec<f64> = (0..n).map(|k| if clamped[k] { 0.0 } else { -grad[k] }).collect();
        let step = chol.solve(&rhs);
        let lin: f64 = (0..n).map(|k| grad[k] * step[k]).sum();
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-12 {
            let dt: Vec<f64> = (0..n)
                .map(|k| (d[k] + alpha * step[k]).clamp(lo[k], hi[k]))
                .collect();
            let qt = model(h, g, &dt);
            if qt <= q + ARMIJO * alpha * lin {
                moved = qt < q || dt != d;
                d = dt;
                q = qt;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return BoxQpResult {
                d,
                iterations: it + 1,
                ok: true,
            };
        }
    }
    BoxQpResult {
        d,
        iterations: MAX_ITER,
        ok: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tridiag(n: usize) -> SymBand {
        let mut h = SymBand::zeros(n, 1);
        for i in 0..n {
            h.set(i, i, 2.0);
            if i > 0 {
                h.set(i, i - 1, -1.0);
            }
        }
        h
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = tridiag(8);
        let g: Vec<f64> = (0..8).map(|k| k as f64 - 3.5).collect();
        let r = solve_box_qp(&h, &g, &[-1e9; 8], &[1e9; 8], 1e-12);
        let hd = h.mul_vec(&r.d);
        for k in 0..8 {
            assert!((hd[k] + g[k]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn satisfies_box_optimality(
            g in proptest::collection::vec(-5.0..5.0f64, 12),
            w in proptest::collection::vec(0.1..2.0f64, 12),
        ) {
            let h = tridiag(12);
            let lo: Vec<f64> = w.iter().map(|v| -v).collect();
            let r = solve_box_qp(&h, &g, &lo, &w, 1e-10);
            prop_assert!(r.ok);
            let hd = h.mul_vec(&r.d);
            for k in 0..12 {
                let gr = g[k] + hd[k];
                prop_assert!(r.d[k] >= lo[k] && r.d[k] <= w[k]);
                if r.d[k] > lo[k] && r.d[k] < w[k] {
                    prop_assert!(gr.abs() < 1e-8, "{k} {gr}");
                } else if r.d[k] <= lo[k] {
                    prop_assert!(gr >= -1e-8);
                } else {
                    prop_assert!(gr <= 1e-8);
                }
            }
        }
    }
}
