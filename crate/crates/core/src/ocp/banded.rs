//! Symmetric banded matrices and their Cholesky factorization.
//!
//! The multiple-shooting Hessian couples only neighbouring shooting intervals,
//! so with the interleaved variable ordering it is banded with a small half
//! bandwidth.

/// Lower band storage: `data[i * (bw + 1) + (bw - (i - j))]` holds A[i][j] for
/// `i - bw <= j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to A[i][j] (and implicitly A[j][i]).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// Replaces row and column `i` by the identity row, decoupling variable `i`.
    pub fn pin(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bw);
        let hi = (i + self.bw).min(self.n - 1);
        for j in lo..=hi {
            self.set(i, j, if i == j { 1.0 } else { 0.0 });
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place Cholesky A = L L'. Returns `None` if A is not positive definite.
    pub fn cholesky(mut self) -> Option<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = d;
            let hi = (j + bw).min(n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.data[self.idx(i, j)];
                for k in lo_i..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / d;
            }
        }
        Some(BandCholesky { l: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: SymBand,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let (n, bw) = (l.n, l.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= l.data[l.idx(i, k)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= l.data[l.idx(k, i)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn random_band(n: usize, bw: usize, vals: &[f64]) -> (SymBand, DMatrix<f64>) {
        // A = M M' + n I with M banded keeps A banded with twice the width.
        let mut m = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i.saturating_sub(bw / 2)..=i {
                m[(i, j)] = vals[k % vals.len()];
                k += 1;
            }
        }
        let a = &m * m.transpose() + DMatrix::identity(n, n) * (n as f64);
        let mut b = SymBand::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                b.set(i, j, a[(i, j)]);
            }
        }
        (b, a)
    }

    proptest! {
        #[test]
        fn solve_matches_dense(
            n in 2usize..60,
            bw in 0usize..16,
            vals in proptest::collection::vec(-2.0..2.0f64, 1..64),
            rhs in proptest::collection::vec(-10.0..10.0f64, 60),
        ) {
            let (band, dense) = random_band(n, bw, &vals);
            let b = &rhs[..n];
            let x = band.clone().cholesky().unwrap().solve(b);
            let x_ref = dense.clone().cholesky().unwrap().solve(&DVector::from_column_slice(b));
            for i in 0..n {
                prop_assert!((x[i] - x_ref[i]).abs() <= 1e-9 * (1.0 + x_ref[i].abs()));
            }
            let ax = band.mul_vec(&x);
            for i in 0..n {
                prop_assert!((ax[i] - b[i]).abs() <= 1e-8 * (1.0 + b[i].abs()));
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = SymBand::zeros(3, 1);
        a.set(0, 0, 1.0);
        a.set(1, 1, -1.0);
        a.set(2, 2, 1.0);
        assert!(a.cholesky().is_none());
    }

    #[test]
    fn pinned_variable_decouples() {
        let (mut band, _) = random_band(10, 4, &[0.3, -1.1, 0.7]);
        band.pin(5);
        let mut b = vec![1.0; 10];
        b[5] = 0.0;
        let x = band.cholesky().unwrap().solve(&b);
        assert_eq!(x[5], 0.0);
    }
}
