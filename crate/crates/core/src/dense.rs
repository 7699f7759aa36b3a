//! Dense row-major matrices, partial-pivoted LU, and the distances used to
//! compare patch matrices.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Relative pivot threshold below which a factorization is declared singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-14;

/// Relative change in the Rayleigh quotient that stops the power iteration.
pub const POWER_RTOL: f64 = 1e-8;

/// Absolute floor on the Rayleigh quotient change. Distances near round-off
/// never settle in relative terms.
pub const POWER_ATOL: f64 = 1e-26;

pub const POWER_MAX_ITERS: usize = 200;

/// Dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        Ok(self.matvec_unchecked(x))
    }

    fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn matvec_transpose_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_len(self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, alpha: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Number of exactly nonzero entries in row `i`.
    pub fn row_nonzeros(&self, i: usize) -> usize {
        self.row(i).iter().filter(|v| **v != 0.0).count()
    }

    /// CSV dump, one row per line, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        Err(Error::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

/// LU factorization with partial pivoting, `P·M = L·U`.
///
/// `lu` holds the unit lower factor below the diagonal and `U` on and above
/// it. Row `i` of `P·M` is row `pivots[i]` of `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFactor {
    lu: DenseMatrix,
    pivots: Vec<usize>,
}

impl DenseFactor {
    pub fn dim(&self) -> usize {
        self.pivots.len()
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn lu(&self) -> &DenseMatrix {
        &self.lu
    }

    /// Solves `M x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), rhs.len())?;
        let mut x: Vec<f64> = self.pivots.iter().map(|&p| rhs[p]).collect();
        self.solve_in_place_permuted(&mut x);
        Ok(x)
    }

    /// Solves in place; `x` must already carry the pivoted right-hand side.
    fn solve_in_place_permuted(&self, x: &mut [f64]) {
        let n = self.dim();
        let lu = &self.lu;
        for i in 1..n {
            let row = lu.row(i);
            let mut s = x[i];
            for j in 0..i {
                s -= row[j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let row = lu.row(i);
            let mut s = x[i];
            for j in i + 1..n {
                s -= row[j] * x[j];
            }
            x[i] = s / row[i];
        }
    }

    /// Solves `Mᵀ x = rhs`.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), rhs.len())?;
        let n = self.dim();
        let lu = &self.lu;
        // Uᵀ z = rhs
        let mut z = rhs.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for j in 0..i {
                s -= lu.get(j, i) * z[j];
            }
            z[i] = s / lu.get(i, i);
        }
        // Lᵀ w = z
        for i in (0..n).rev() {
            let mut s = z[i];
            for j in i + 1..n {
                s -= lu.get(j, i) * z[j];
            }
            z[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.pivots.iter().enumerate() {
            x[p] = z[i];
        }
        Ok(x)
    }
}

/// Partial-pivoted LU factorization.
pub fn lu_factor(m: &DenseMatrix) -> Result<DenseFactor> {
    if !m.is_square() {
        return Err(Error::NonSquareMatrix {
            rows: m.rows,
            cols: m.cols,
        });
    }
    let n = m.rows;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot factor an empty matrix".into()));
    }
    let col_max: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| m.get(i, j).abs()).fold(0.0, f64::max))
        .collect();

    let mut lu = m.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (p, pmax) = (k..n)
            .map(|i| (i, lu.get(i, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax == 0.0 || pmax < SINGULAR_PIVOT_RTOL * col_max[k] {
            return Err(Error::SingularMatrix { pivot: k });
        }
        if p != k {
            pivots.swap(p, k);
            for j in 0..n {
                lu.data.swap(p * n + j, k * n + j);
            }
        }
        let pivot = lu.get(k, k);
        for i in k + 1..n {
            let l = lu.get(i, k) / pivot;
            lu.set(i, k, l);
            if l != 0.0 {
                let (upper, lower) = lu.data.split_at_mut(i * n);
                let krow = &upper[k * n + k + 1..k * n + n];
                let irow = &mut lower[k + 1..n];
                for (a, b) in irow.iter_mut().zip(krow) {
                    *a -= l * b;
                }
            }
        }
    }
    Ok(DenseFactor { lu, pivots })
}

pub fn lu_solve(f: &DenseFactor, rhs: &[f64]) -> Result<Vec<f64>> {
    f.solve(rhs)
}

/// Deterministic start vector `[1, 1+1e-6, 1+2e-6, ...]`, normalized.
fn power_start(n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 1e-6 * i as f64).collect();
    let nrm = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nrm);
    v
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Action of `C = I - A B⁻¹` and its transpose.
struct ResidualOperator<'a> {
    a: &'a DenseMatrix,
    bf: &'a DenseFactor,
}

impl ResidualOperator<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.bf.pivots.iter().map(|&p| x[p]).collect();
        self.bf.solve_in_place_permuted(&mut y);
        let ay = self.a.matvec_unchecked(&y);
        x.iter().zip(ay).map(|(xi, ai)| xi - ai).collect()
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let atx = self.a.matvec_transpose_unchecked(x);
        let y = self.bf.solve_transpose(&atx).expect("dimension checked");
        x.iter().zip(y).map(|(xi, yi)| xi - yi).collect()
    }
}

/// Power iteration on `CᵀC`. Stops early once the estimate reaches `stop_at`
/// (squared), which is sound because the Rayleigh quotient of a power
/// iteration on a positive semidefinite matrix never decreases.
fn power_iteration(a: &DenseMatrix, bf: &DenseFactor, stop_at: f64) -> f64 {
    let op = ResidualOperator { a, bf };
    let mut v = power_start(a.rows);
    let mut rq_prev = f64::NAN;
    let mut rq_max: f64 = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = op.apply(&v);
        let rq: f64 = w.iter().map(|x| x * x).sum();
        rq_max = rq_max.max(rq);
        if rq_max >= stop_at {
            break;
        }
        if (rq - rq_prev).abs() <= POWER_RTOL * rq + POWER_ATOL {
            break;
        }
        rq_prev = rq;
        let z = op.apply_transpose(&w);
        let nz = norm2(&z);
        if nz == 0.0 {
            break;
        }
        v = z.into_iter().map(|x| x / nz).collect();
    }
    rq_max.sqrt()
}

/// `‖I − A·B⁻¹‖₂` by power iteration, with `B⁻¹` applied through its factors.
pub fn spectral_distance(a: &DenseMatrix, bf: &DenseFactor) -> Result<f64> {
    check_square_pair(a, bf)?;
    Ok(power_iteration(a, bf, f64::INFINITY))
}

/// Whether `‖I − A·B⁻¹‖₂ < eps`, abandoning the iteration as soon as the
/// running lower bound reaches `eps`. Agrees with `spectral_distance(a, bf)? < eps`.
pub fn spectral_distance_below(a: &DenseMatrix, bf: &DenseFactor, eps: f64) -> Result<bool> {
    check_square_pair(a, bf)?;
    Ok(power_iteration(a, bf, eps * eps) < eps)
}

fn check_square_pair(a: &DenseMatrix, bf: &DenseFactor) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NonSquareMatrix {
            rows: a.rows,
            cols: a.cols,
        });
    }
    check_len(bf.dim(), a.rows)
}

/// Sum of absolute entry differences.
pub fn entrywise_l1_distance(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            expected: a.data.len(),
            found: b.data.len(),
        });
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum())
}

/// Entrywise arithmetic mean, accumulated in input order.
pub fn entrywise_mean<'a, I>(ms: I) -> Result<DenseMatrix>
where
    I: IntoIterator<Item = &'a DenseMatrix>,
{
    let mut iter = ms.into_iter();
    let first = iter.next().ok_or(Error::EmptyCluster)?;
    let mut acc = first.clone();
    let mut count = 1usize;
    for m in iter {
        if m.rows != acc.rows || m.cols != acc.cols {
            return Err(Error::DimensionMismatch {
                expected: acc.data.len(),
                found: m.data.len(),
            });
        }
        for (a, b) in acc.data.iter_mut().zip(&m.data) {
            *a += b;
        }
        count += 1;
    }
    let inv = count as f64;
    acc.data.iter_mut().for_each(|a| *a /= inv);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, diag_boost: f64) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |i, j| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if i == j {
                v + diag_boost
            } else {
                v
            }
        })
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn identity_factor() {
        let f = lu_factor(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(f.pivots(), &[0, 1, 2]);
        assert_eq!(f.lu(), &DenseMatrix::identity(3));
        assert_eq!(lu_solve(&f, &[5.0, -3.0, 1.0]).unwrap(), vec![5.0, -3.0, 1.0]);
    }

    #[test]
    fn permutation_needs_pivoting() {
        let m = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let f = lu_factor(&m).unwrap();
        assert_eq!(f.solve(&[1.0, 2.0]).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn scaled_identity_solve() {
        let f = lu_factor(&DenseMatrix::identity(2).scale(2.0)).unwrap();
        assert_eq!(f.solve(&[4.0, 6.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn singular_detected() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(lu_factor(&m), Err(Error::SingularMatrix { pivot: 1 })));
        assert!(matches!(
            lu_factor(&DenseMatrix::zeros(2, 2)),
            Err(Error::SingularMatrix { pivot: 0 })
        ));
    }

    #[test]
    fn solve_dimension_mismatch() {
        let f = lu_factor(&DenseMatrix::identity(3)).unwrap();
        assert!(matches!(
            f.solve(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn diagonally_dominant_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 10, 12.0);
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = lu_factor(&m).unwrap().solve(&b).unwrap();
        let r = m.matvec(&x).unwrap();
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 8, 4.0);
        let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rhs = m.matvec(&x0).unwrap();
        let x = lu_factor(&m).unwrap().solve(&rhs).unwrap();
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 7, 0.0);
        let b: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = lu_factor(&m).unwrap().solve_transpose(&b).unwrap();
        let x2 = lu_factor(&m.transpose()).unwrap().solve(&b).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn spectral_distance_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_matrix(&mut rng, 6, 3.0);
        let f = lu_factor(&b).unwrap();
        assert!(spectral_distance(&b, &f).unwrap() < 1e-10);

        let i = lu_factor(&DenseMatrix::identity(4)).unwrap();
        let two = DenseMatrix::identity(4).scale(2.0);
        assert_relative_eq!(spectral_distance(&two, &i).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn early_exit_agrees_with_full_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 6, 3.0);
            let b = random_matrix(&mut rng, 6, 3.0);
            let f = lu_factor(&b).unwrap();
            let d = spectral_distance(&a, &f).unwrap();
            for eps in [0.5 * d, 0.99 * d, 1.01 * d, 2.0 * d] {
                assert_eq!(spectral_distance_below(&a, &f, eps).unwrap(), d < eps);
            }
        }
    }

    #[test]
    fn l1_distance_cases() {
        let i = DenseMatrix::identity(2);
        assert_eq!(entrywise_l1_distance(&i, &i).unwrap(), 0.0);
        assert_eq!(entrywise_l1_distance(&i, &DenseMatrix::zeros(2, 2)).unwrap(), 2.0);
        assert!(entrywise_l1_distance(&i, &DenseMatrix::zeros(3, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 5, 0.0);
        let b = random_matrix(&mut rng, 5, 0.0);
        let mut naive = 0.0;
        for r in 0..5 {
            for c in 0..5 {
                naive += (a.get(r, c) - b.get(r, c)).abs();
            }
        }
        assert_eq!(entrywise_l1_distance(&a, &b).unwrap(), naive);
    }

    #[test]
    fn mean_cases() {
        let i = DenseMatrix::identity(3);
        assert_eq!(entrywise_mean([&i]).unwrap(), i);
        let three = i.scale(3.0);
        assert_eq!(entrywise_mean([&i, &three]).unwrap(), i.scale(2.0));
        assert!(matches!(
            entrywise_mean(std::iter::empty::<&DenseMatrix>()),
            Err(Error::EmptyCluster)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let ms: Vec<DenseMatrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 0.0)).collect();
        let mean = entrywise_mean(&ms).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let oracle = (ms[0].get(r, c) + ms[1].get(r, c) + ms[2].get(r, c)) / 3.0;
                assert!((mean.get(r, c) - oracle).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csv_dump_round_trips() {
        let m = DenseMatrix::from_rows(&[&[0.1, -2.0 / 3.0], &[1e-300, 7.0]]);
        let parsed: Vec<f64> = m
            .to_csv()
            .lines()
            .flat_map(|l| l.split(',').map(|t| t.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, m.as_slice());
    }
}
