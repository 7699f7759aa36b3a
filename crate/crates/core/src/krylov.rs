//! Restarted GMRES with modified Gram-Schmidt Arnoldi and Givens rotations.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::precond::Preconditioner;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Solve `A M⁻¹ y = b`; the residual tracked is the true one.
    Right,
    /// Solve `M⁻¹ A x = M⁻¹ b`; the residual tracked is preconditioned.
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    pub restart: usize,
    pub tol: f64,
    /// Cap on total inner iterations.
    pub max_iters: usize,
    pub side: Side,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            restart: 20,
            tol: 1e-8,
            max_iters: 1000,
            side: Side::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// Total inner Arnoldi steps.
    pub iterations: usize,
    pub restarts: usize,
    /// Relative residual estimate, starting with the initial one.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// `‖b − Ax‖ / ‖b‖`, recomputed from the returned iterate.
    pub final_relative_residual: f64,
}

impl SolveReport {
    pub fn write_history_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "iteration,relative_residual")?;
        for (i, r) in self.residual_history.iter().enumerate() {
            writeln!(w, "{i},{r:.16e}")?;
        }
        Ok(())
    }

    pub fn write_history_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_history_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(a: &SparseMatrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let ax = a.spmv(x)?;
    Ok(b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect())
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Zero initial guess. Running out of iterations is not an error: the last
/// iterate is returned with `converged = false`.
pub fn gmres(
    a: &SparseMatrix,
    b: &[f64],
    pc: Option<&dyn Preconditioner>,
    opts: GmresOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::NonSquareMatrix {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    if let Some(p) = pc {
        if p.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: p.dim(),
            });
        }
    }
    if opts.restart == 0 || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("restart must be ≥ 1 and tol positive".into()));
    }
    let precondition = |v: &[f64]| -> Result<Vec<f64>> {
        match pc {
            Some(p) => p.apply(v),
            None => Ok(v.to_vec()),
        }
    };

    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        let report = SolveReport {
            iterations: 0,
            restarts: 0,
            residual_history: Vec::new(),
            converged: true,
            final_relative_residual: 0.0,
        };
        return Ok((x, report));
    }
    // norm against which the tracked residual is measured
    let scale = match opts.side {
        Side::Right => bnorm,
        Side::Left => norm(&precondition(b)?),
    };

    let m = opts.restart;
    let mut history = vec![];
    let mut iterations = 0;
    let mut restarts = 0;
    let mut converged = false;

    loop {
        let r = residual(a, b, &x)?;
        let r = match opts.side {
            Side::Right => r,
            Side::Left => precondition(&r)?,
        };
        let beta = norm(&r);
        if history.is_empty() {
            history.push(beta / scale);
        }
        if beta / scale <= opts.tol || iterations >= opts.max_iters {
            converged = beta / scale <= opts.tol;
            break;
        }
        if iterations > 0 {
            restarts += 1;
        }

        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut cs: Vec<f64> = Vec::with_capacity(m);
        let mut sn: Vec<f64> = Vec::with_capacity(m);
        let mut g = vec![beta];
        let mut inner_done = false;

        for j in 0..m {
            let vj = &basis[j];
            let mut w = match opts.side {
                Side::Right => a.spmv(&precondition(vj)?)?,
                Side::Left => precondition(&a.spmv(vj)?)?,
            };
            let mut col = vec![0.0; j + 2];
            for (i, vi) in basis.iter().enumerate() {
                let hij = dot(&w, vi);
                col[i] = hij;
                for (wk, vk) in w.iter_mut().zip(vi) {
                    *wk -= hij * vk;
                }
            }
            let wnorm = norm(&w);
            col[j + 1] = wnorm;
            for i in 0..j {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let (c, s) = givens(col[j], col[j + 1]);
            col[j] = c * col[j] + s * col[j + 1];
            col[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g.push(-s * g[j]);
            g[j] *= c;
            h.push(col);
            iterations += 1;
            let est = g[j + 1].abs() / scale;
            history.push(est);

            let breakdown = wnorm <= 1e-14 * beta;
            if est <= opts.tol || breakdown || iterations >= opts.max_iters {
                inner_done = true;
            } else {
                basis.push(w.iter().map(|v| v / wnorm).collect());
            }
            if inner_done {
                break;
            }
        }

        // back substitution on the triangular system
        let k = h.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for (l, yl) in y.iter().enumerate().skip(i + 1) {
                s -= h[l][i] * yl;
            }
            y[i] = s / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (yi, vi) in y.iter().zip(&basis) {
            for (u, v) in update.iter_mut().zip(vi) {
                *u += yi * v;
            }
        }
        let update = match opts.side {
            Side::Right => precondition(&update)?,
            Side::Left => update,
        };
        for (xi, u) in x.iter_mut().zip(&update) {
            *xi += u;
        }
        if !inner_done && iterations >= opts.max_iters {
            break;
        }
    }

    let final_relative_residual = norm(&residual(a, b, &x)?) / bnorm;
    if opts.side == Side::Right {
        converged = final_relative_residual <= opts.tol;
    }
    let report = SolveReport {
        iterations,
        restarts,
        residual_history: history,
        converged,
        final_relative_residual,
    };
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{lu_factor, DenseMatrix};
    use crate::precond::FnPreconditioner;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64, n: usize) -> (SparseMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DenseMatrix::from_fn(n, n, |i, j| rng.gen_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 });
        let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (SparseMatrix::from_dense(&m), b)
    }

    #[test]
    fn identity_one_step() {
        let a = SparseMatrix::identity(7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 + 1.0).collect();
        let (x, rep) = gmres(&a, &b, None, GmresOptions::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        for (p, q) in x.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_preconditioner_one_step() {
        let d: Vec<f64> = (1..=5).map(f64::from).collect();
        let a = SparseMatrix::from_diagonal(&d);
        let inv = FnPreconditioner::new(5, |r: &[f64]| Ok(r.iter().zip(1..=5).map(|(v, k)| v / k as f64).collect()));
        for side in [Side::Right, Side::Left] {
            let opts = GmresOptions { side, ..Default::default() };
            let (_, rep) = gmres(&a, &[1.0; 5], Some(&inv), opts).unwrap();
            assert_eq!(rep.iterations, 1);
            assert!(rep.converged);
        }
    }

    #[test]
    fn zero_rhs() {
        let (x, rep) = gmres(&SparseMatrix::identity(3), &[0.0; 3], None, GmresOptions::default()).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert!(rep.converged && rep.iterations == 0);
    }

    #[test]
    fn iteration_cap() {
        let (a, b) = random_system(3, 30);
        let opts = GmresOptions {
            restart: 3,
            max_iters: 7,
            tol: 1e-14,
            ..Default::default()
        };
        let (_, rep) = gmres(&a, &b, None, opts).unwrap();
        assert_eq!(rep.iterations, 7);
        assert!(!rep.converged);
        assert_eq!(rep.restarts, 2);
        assert_eq!(rep.residual_history.len(), 8);
    }

    #[test]
    fn history_csv() {
        let (_, rep) = gmres(&SparseMatrix::identity(2), &[1.0, 1.0], None, GmresOptions::default()).unwrap();
        let mut out = Vec::new();
        rep.write_history_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("iteration,relative_residual\n0,1.0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn krylov_exactness(seed in 0u64..10_000, n in 2usize..=30) {
            let (a, b) = random_system(seed, n);
            let opts = GmresOptions { restart: n, tol: 1e-10, max_iters: n, side: Side::Right };
            let (x, rep) = gmres(&a, &b, None, opts).unwrap();
            prop_assert!(rep.converged);
            prop_assert!(rep.iterations <= n);
            let xd = lu_factor(&a.to_dense()).unwrap().solve(&b).unwrap();
            for (p, q) in x.iter().zip(&xd) {
                prop_assert!((p - q).abs() < 1e-7 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn residual_monotone_and_reported(seed in 0u64..10_000, restart in 1usize..8) {
            let (a, b) = random_system(seed, 25);
            let opts = GmresOptions { restart, tol: 1e-9, max_iters: 300, side: Side::Right };
            let (x, rep) = gmres(&a, &b, None, opts).unwrap();
            let h = &rep.residual_history;
            prop_assert!(h.iter().all(|&r| r > 0.0));
            // within each cycle the least-squares residual cannot grow
            for cycle in h[1..].chunks(restart) {
                for w in cycle.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
                }
            }
            let direct = norm(&residual(&a, &b, &x).unwrap()) / norm(&b);
            prop_assert!((direct - rep.final_relative_residual).abs() <= 1e-12);
            if rep.converged {
                prop_assert!(rep.final_relative_residual <= 1e-9);
            }
        }
    }
}
