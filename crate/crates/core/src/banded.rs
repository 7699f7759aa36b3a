//! Banded LU with partial pivoting, used for the direct coarse solve.
//!
//! Multipliers are kept per elimination step and row interchanges are
//! replayed during the forward solve, so `L` is never permuted after the fact.

use crate::dense::SINGULAR_PIVOT_RTOL;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone)]
pub struct BandedFactor {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    // row i holds columns i-kl ..= i+kl+ku
    u: Vec<f64>,
    mult: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedFactor {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NonSquareMatrix {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let n = a.n();
        let (kl, ku) = a.bandwidth();
        let width = 2 * kl + ku + 1;
        let mut u = vec![0.0; n * width];
        let mut col_max = vec![0.0f64; n];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                u[i * width + j + kl - i] = v;
                col_max[j] = col_max[j].max(v.abs());
            }
        }
        let at = |i: usize, j: usize| i * width + j + kl - i;

        let mut mult = vec![0.0; n * kl];
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut pmax = u[at(k, k)].abs();
            for i in k + 1..=last_row {
                let v = u[at(i, k)].abs();
                if v > pmax {
                    p = i;
                    pmax = v;
                }
            }
            if pmax == 0.0 || pmax < SINGULAR_PIVOT_RTOL * col_max[k] {
                return Err(Error::SingularMatrix { pivot: k });
            }
            pivots[k] = p;
            if p != k {
                for j in k..=last_col {
                    u.swap(at(k, j), at(p, j));
                }
            }
            let pivot = u[at(k, k)];
            for i in k + 1..=last_row {
                let l = u[at(i, k)] / pivot;
                mult[k * kl + (i - k - 1)] = l;
                u[at(i, k)] = 0.0;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        u[at(i, j)] -= l * u[at(k, j)];
                    }
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            width,
            u,
            mult,
            pivots,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored doubles, for memory reporting.
    pub fn storage_len(&self) -> usize {
        self.u.len() + self.mult.len()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if rhs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: rhs.len(),
            });
        }
        let (kl, ku, width) = (self.kl, self.ku, self.width);
        let at = |i: usize, j: usize| i * width + j + kl - i;
        let mut b = rhs.to_vec();
        for k in 0..n {
            b.swap(k, self.pivots[k]);
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.mult[k * kl + (i - k - 1)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.u[at(k, j)] * b[j];
            }
            b[k] = s / self.u[at(k, k)];
        }
        Ok(b)
    }
}
