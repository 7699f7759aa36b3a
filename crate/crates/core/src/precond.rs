//! Additive patch preconditioners, exact and database-backed, plus the
//! two-level combination with a direct coarse solve.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::banded::BandedFactor;
use crate::compress::Database;
use crate::dense::{lu_factor, DenseFactor};
use crate::error::{Error, Result};
use crate::fem::CoarseSpace;
use crate::patch::PatchSet;
use crate::sparse::SparseMatrix;

/// Linear action `r -> M⁻¹ r`.
pub trait Preconditioner: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>>;
}

/// Wall-clock accounting of applies.
#[derive(Debug, Default)]
pub struct ApplyTimer {
    nanos: AtomicU64,
    calls: AtomicU64,
}

impl ApplyTimer {
    fn record(&self, start: Instant) {
        self.nanos.fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn seconds(&self) -> f64 {
        self.nanos.load(Ordering::Relaxed) as f64 * 1e-9
    }

    pub fn reset(&self) {
        self.nanos.store(0, Ordering::Relaxed);
        self.calls.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub enum PatchMode {
    /// One factor per patch.
    Exact(Vec<DenseFactor>),
    /// Shared factors selected through the database map.
    Compressed(Database),
}

#[derive(Debug)]
pub struct PatchPreconditioner {
    patch_set: PatchSet,
    mode: PatchMode,
    omega: f64,
    setup_seconds: f64,
    timer: ApplyTimer,
}

impl PatchPreconditioner {
    /// Factors every patch matrix `V_k A V_kᵀ`.
    pub fn exact(a: &SparseMatrix, patch_set: PatchSet) -> Result<Self> {
        check_dim(a.nrows(), patch_set.dim())?;
        let start = Instant::now();
        let factors = patch_set
            .patches()
            .par_iter()
            .enumerate()
            .map(|(k, idx)| {
                let m = a.extract_submatrix(idx)?;
                lu_factor(&m).map_err(|e| Error::PatchFactor {
                    patch: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pc = Self::from_mode(patch_set, PatchMode::Exact(factors))?;
        pc.setup_seconds = start.elapsed().as_secs_f64();
        Ok(pc)
    }

    pub fn compressed(patch_set: PatchSet, db: Database) -> Result<Self> {
        Self::from_mode(patch_set, PatchMode::Compressed(db))
    }

    pub fn from_mode(patch_set: PatchSet, mode: PatchMode) -> Result<Self> {
        let count = match &mode {
            PatchMode::Exact(f) => f.len(),
            PatchMode::Compressed(db) => db.num_patches(),
        };
        if count != patch_set.len() {
            return Err(Error::DimensionMismatch {
                expected: patch_set.len(),
                found: count,
            });
        }
        let factors: Box<dyn Iterator<Item = &DenseFactor>> = match &mode {
            PatchMode::Exact(f) => Box::new(f.iter()),
            PatchMode::Compressed(db) => Box::new(db.entries().iter().map(|e| &e.factor)),
        };
        for f in factors {
            if f.dim() != patch_set.patch_size() {
                return Err(Error::DimensionMismatch {
                    expected: patch_set.patch_size(),
                    found: f.dim(),
                });
            }
        }
        Ok(Self {
            patch_set,
            mode,
            omega: 1.0,
            setup_seconds: 0.0,
            timer: ApplyTimer::default(),
        })
    }

    /// Empty patch set: applies to zero.
    pub fn none(n: usize) -> Self {
        Self {
            patch_set: PatchSet::empty(n),
            mode: PatchMode::Exact(Vec::new()),
            omega: 1.0,
            setup_seconds: 0.0,
            timer: ApplyTimer::default(),
        }
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    /// Adds database construction time, which happens outside this type.
    pub fn with_setup_seconds(mut self, secs: f64) -> Self {
        self.setup_seconds += secs;
        self
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mode(&self) -> &PatchMode {
        &self.mode
    }

    pub fn patch_set(&self) -> &PatchSet {
        &self.patch_set
    }

    pub fn setup_seconds(&self) -> f64 {
        self.setup_seconds
    }

    pub fn timer(&self) -> &ApplyTimer {
        &self.timer
    }

    /// Number of dense factors held.
    pub fn stored_factors(&self) -> usize {
        match &self.mode {
            PatchMode::Exact(f) => f.len(),
            PatchMode::Compressed(db) => db.len(),
        }
    }

    fn factor(&self, k: usize) -> &DenseFactor {
        match &self.mode {
            PatchMode::Exact(f) => &f[k],
            PatchMode::Compressed(db) => db.factor_for(k),
        }
    }

    /// `W Σ_k V_kᵀ solve_k(V_k r)`; undamped.
    pub fn apply_patches(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_dim(r.len(), self.patch_set.dim())?;
        let start = Instant::now();
        let patches = self.patch_set.patches();
        let locals: Vec<Vec<f64>> = patches
            .par_iter()
            .enumerate()
            .map(|(k, idx)| {
                let rk: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
                self.factor(k).solve(&rk)
            })
            .collect::<Result<_>>()?;
        // scatter in patch order so the sum is independent of scheduling
        let mut z = vec![0.0; r.len()];
        for (idx, zk) in patches.iter().zip(&locals) {
            for (&i, &v) in idx.iter().zip(zk) {
                z[i] += v;
            }
        }
        for (zi, w) in z.iter_mut().zip(self.patch_set.weights()) {
            *zi *= w;
        }
        self.timer.record(start);
        Ok(z)
    }

    /// `x + ω M⁻¹ (b − A x)`
    pub fn smooth(&self, a: &SparseMatrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        check_dim(a.nrows(), x.len())?;
        check_dim(a.nrows(), b.len())?;
        let ax = a.spmv(x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let z = self.apply_patches(&r)?;
        Ok(x.iter().zip(&z).map(|(xi, zi)| xi + self.omega * zi).collect())
    }
}

impl Preconditioner for PatchPreconditioner {
    fn dim(&self) -> usize {
        self.patch_set.dim()
    }

    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.apply_patches(r)?;
        if self.omega != 1.0 {
            z.iter_mut().for_each(|v| *v *= self.omega);
        }
        Ok(z)
    }
}

/// `ω M⁻¹ + P₀ (P₀ᵀ A P₀)⁻¹ P₀ᵀ`
#[derive(Debug)]
pub struct ComboPreconditioner {
    patch_pc: PatchPreconditioner,
    p0: SparseMatrix,
    coarse_factor: BandedFactor,
    coarse_setup_seconds: f64,
    timer: ApplyTimer,
}

impl ComboPreconditioner {
    pub fn new(patch_pc: PatchPreconditioner, coarse: CoarseSpace) -> Result<Self> {
        check_dim(coarse.p0.nrows(), patch_pc.dim())?;
        let start = Instant::now();
        let coarse_factor = BandedFactor::factor(&coarse.coarse_matrix)?;
        Ok(Self {
            patch_pc,
            p0: coarse.p0,
            coarse_factor,
            coarse_setup_seconds: start.elapsed().as_secs_f64(),
            timer: ApplyTimer::default(),
        })
    }

    pub fn patch_pc(&self) -> &PatchPreconditioner {
        &self.patch_pc
    }

    pub fn coarse_solve(&self, rc: &[f64]) -> Result<Vec<f64>> {
        self.coarse_factor.solve(rc)
    }

    pub fn setup_seconds(&self) -> f64 {
        self.patch_pc.setup_seconds() + self.coarse_setup_seconds
    }

    pub fn timer(&self) -> &ApplyTimer {
        &self.timer
    }
}

impl Preconditioner for ComboPreconditioner {
    fn dim(&self) -> usize {
        self.p0.nrows()
    }

    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_dim(r.len(), self.dim())?;
        let start = Instant::now();
        let mut z = self.patch_pc.apply(r)?;
        let rc = self.p0.spmv_transpose(r)?;
        let zc = self.p0.spmv(&self.coarse_solve(&rc)?)?;
        for (zi, ci) in z.iter_mut().zip(&zc) {
            *zi += ci;
        }
        self.timer.record(start);
        Ok(z)
    }
}

/// Wraps a closure, mainly for tests.
pub struct FnPreconditioner<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> FnPreconditioner<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> Preconditioner for FnPreconditioner<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_dim(r.len(), self.n)?;
        (self.f)(r)
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
