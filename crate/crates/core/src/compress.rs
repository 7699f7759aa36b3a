//! Construction of the factorization database: greedy tolerance matching,
//! k-means style clustering, bootstrapped clustering, and the partitioned
//! driver that clusters each boundary pattern separately.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{
    entrywise_l1_distance, entrywise_mean, lu_factor, spectral_distance, spectral_distance_below,
    DenseFactor, DenseMatrix,
};
use crate::error::{Error, Result};
use crate::patch::{boundary_partition, BoundaryPattern};

pub const DEFAULT_MAX_ITERS: usize = 50;

/// Distance used by the greedy tolerance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// `‖I − A B⁻¹‖₂`
    Spectral,
    /// `‖A − B‖_ℓ1`
    EntrywiseL1,
}

/// How cluster distances and representatives are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// ℓ1 distance, representative is the entrywise cluster mean.
    Entrywise,
    /// Spectral distance, representative is the entrywise cluster mean.
    Spectral,
    /// Spectral distance, representative is the member with the smallest
    /// summed squared distance to the rest of its cluster.
    VarianceMinimizing,
}

/// Provenance of a database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// One entry per patch.
    Identity,
    Greedy {
        flavor: Flavor,
        eps: f64,
        best_match: bool,
    },
    KMeans {
        variant: Variant,
        clusters: usize,
        seed: u64,
        iterations: usize,
        converged: bool,
    },
    Bootstrapped {
        variant: Variant,
        eps: f64,
        iterations: usize,
        converged: bool,
    },
    Partitioned {
        budget: usize,
        partitions: usize,
        variant: Variant,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct DbEntry {
    pub representative: DenseMatrix,
    pub factor: DenseFactor,
    pub partition: Option<BoundaryPattern>,
}

impl DbEntry {
    fn new(representative: DenseMatrix, factor: DenseFactor) -> Self {
        Self {
            representative,
            factor,
            partition: None,
        }
    }
}

/// Factored representatives `B_j` and the assignment map `phi`.
#[derive(Debug, Clone)]
pub struct Database {
    entries: Vec<DbEntry>,
    phi: Vec<usize>,
    method: Method,
}

impl Database {
    /// Checks that `phi` is total and onto the entries.
    pub fn new(entries: Vec<DbEntry>, phi: Vec<usize>, method: Method) -> Result<Self> {
        let mut hit = vec![false; entries.len()];
        for &j in &phi {
            if j >= entries.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    n: entries.len(),
                });
            }
            hit[j] = true;
        }
        if let Some(j) = hit.iter().position(|h| !h) {
            return Err(Error::InvalidArgument(format!("database entry {j} has no patch")));
        }
        Ok(Self { entries, phi, method })
    }

    /// Lossless database: every patch factored, `phi` the identity.
    pub fn identity(patches: &[DenseMatrix]) -> Result<Self> {
        let entries = factor_all(patches)?
            .into_iter()
            .zip(patches)
            .map(|(f, m)| DbEntry::new(m.clone(), f))
            .collect();
        Self::new(entries, (0..patches.len()).collect(), Method::Identity)
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn phi(&self) -> &[usize] {
        &self.phi
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    /// `m_p`
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `n_p`
    pub fn num_patches(&self) -> usize {
        self.phi.len()
    }

    pub fn factor_for(&self, patch: usize) -> &DenseFactor {
        &self.entries[self.phi[patch]].factor
    }

    /// `(n_p − m_p) / n_p`
    pub fn compression_ratio(&self) -> f64 {
        let np = self.num_patches() as f64;
        (np - self.len() as f64) / np
    }

    /// Number of patches mapped to each entry.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.len()];
        for &j in &self.phi {
            counts[j] += 1;
        }
        counts
    }

    pub fn is_onto(&self) -> bool {
        self.occupancy().iter().all(|&c| c > 0)
    }

    pub fn index_json(&self) -> serde_json::Value {
        let patch_size = self.entries.first().map_or(0, |e| e.representative.rows());
        serde_json::json!({
            "method": self.method,
            "p_s": patch_size,
            "m_p": self.len(),
            "n_p": self.num_patches(),
            "phi": self.phi,
            "partitions": self.entries.iter()
                .map(|e| e.partition.as_ref().map(BoundaryPattern::to_bitstring))
                .collect::<Vec<_>>(),
        })
    }

    pub fn write_index_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.index_json())?;
        w.flush()?;
        Ok(())
    }

    /// Representatives back to back as little-endian row-major `f64`.
    pub fn write_representatives(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            for v in e.representative.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn factor_all(patches: &[DenseMatrix]) -> Result<Vec<DenseFactor>> {
    patches
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            lu_factor(m).map_err(|e| Error::PatchFactor {
                patch: k,
                source: Box::new(e),
            })
        })
        .collect()
}

fn factor_patch(k: usize, m: &DenseMatrix) -> Result<DenseFactor> {
    lu_factor(m).map_err(|e| Error::PatchFactor {
        patch: k,
        source: Box::new(e),
    })
}

fn check_patches(patches: &[DenseMatrix]) -> Result<()> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("no patches".into()))?;
    for m in patches {
        if m.rows() != first.rows() || m.cols() != first.cols() {
            return Err(Error::DimensionMismatch {
                expected: first.rows(),
                found: m.rows(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    pub flavor: Flavor,
    /// Match the closest qualifying entry instead of the first.
    pub best_match: bool,
}

impl GreedyOptions {
    pub fn first_match(flavor: Flavor) -> Self {
        Self {
            flavor,
            best_match: false,
        }
    }
}

/// Single pass over the patches; each one reuses the first existing entry
/// within `eps`, otherwise it is factored and appended.
pub fn greedy_tolerance(patches: &[DenseMatrix], eps: f64, flavor: Flavor) -> Result<Database> {
    greedy_tolerance_with(patches, eps, GreedyOptions::first_match(flavor))
}

pub fn greedy_tolerance_with(patches: &[DenseMatrix], eps: f64, opts: GreedyOptions) -> Result<Database> {
    Ok(greedy_capped(patches, eps, opts, usize::MAX)?.expect("uncapped greedy always finishes"))
}

/// Greedy pass that gives up once the database would exceed `cap` entries.
fn greedy_capped(patches: &[DenseMatrix], eps: f64, opts: GreedyOptions, cap: usize) -> Result<Option<Database>> {
    check_patches(patches)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {eps}")));
    }
    let mut entries: Vec<DbEntry> = Vec::new();
    let mut phi = Vec::with_capacity(patches.len());
    for (i, a) in patches.iter().enumerate() {
        let found = if opts.best_match {
            best_match(a, &entries, eps, opts.flavor)?
        } else {
            first_match(a, &entries, eps, opts.flavor)?
        };
        match found {
            Some(j) => phi.push(j),
            None => {
                if entries.len() == cap {
                    return Ok(None);
                }
                let f = factor_patch(i, a)?;
                phi.push(entries.len());
                entries.push(DbEntry::new(a.clone(), f));
            }
        }
    }
    let method = Method::Greedy {
        flavor: opts.flavor,
        eps,
        best_match: opts.best_match,
    };
    Database::new(entries, phi, method).map(Some)
}

/// Searches the tolerance geometrically for a greedy database whose size is
/// within `slack * target` of `target`; returns the closest one seen if the
/// window is never hit.
pub fn greedy_for_size(patches: &[DenseMatrix], target: usize, flavor: Flavor, slack: f64) -> Result<Database> {
    check_patches(patches)?;
    if target == 0 || !(slack >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad size target {target} (slack {slack})")));
    }
    let window = (target as f64 * slack).floor() as usize;
    let cap = 2 * target + 16;
    let opts = GreedyOptions::first_match(flavor);
    let mut best: Option<Database> = None;
    // lo: tolerance known to give too many entries, hi: too few or enough
    let (mut lo, mut hi): (Option<f64>, Option<f64>) = (None, None);
    let mut eps = 1.0;
    for step in 0..200 {
        let db = greedy_capped(patches, eps, opts, cap)?;
        let size = db.as_ref().map_or(usize::MAX, Database::len);
        if let Some(db) = db {
            if size.abs_diff(target) <= window {
                return Ok(db);
            }
            if best.as_ref().is_none_or(|b| size.abs_diff(target) < b.len().abs_diff(target)) {
                best = Some(db);
            }
        }
        if size > target {
            lo = Some(eps);
        } else {
            hi = Some(eps);
        }
        eps = match (lo, hi) {
            (Some(l), None) => l * 4.0,
            (None, Some(h)) => h / 4.0,
            (Some(l), Some(h)) if h / l > 1.0 + 1e-12 => (l * h).sqrt(),
            _ => break,
        };
        if step > 0 && !(eps > 1e-300 && eps < 1e300) {
            break;
        }
    }
    best.ok_or_else(|| Error::InvalidArgument(format!("no greedy database near {target} entries")))
}

fn first_match(a: &DenseMatrix, entries: &[DbEntry], eps: f64, flavor: Flavor) -> Result<Option<usize>> {
    let test = |e: &DbEntry| -> bool {
        match flavor {
            Flavor::Spectral => spectral_distance_below(a, &e.factor, eps).unwrap_or(false),
            Flavor::EntrywiseL1 => entrywise_l1_distance(a, &e.representative).is_ok_and(|d| d < eps),
        }
    };
    // position_first returns the lowest matching index regardless of scheduling
    Ok(entries.par_iter().with_min_len(4).position_first(test))
}

fn best_match(a: &DenseMatrix, entries: &[DbEntry], eps: f64, flavor: Flavor) -> Result<Option<usize>> {
    let dists: Vec<f64> = entries
        .par_iter()
        .map(|e| match flavor {
            Flavor::Spectral => spectral_distance(a, &e.factor),
            Flavor::EntrywiseL1 => entrywise_l1_distance(a, &e.representative),
        })
        .collect::<Result<_>>()?;
    Ok(argmin(&dists).filter(|&j| dists[j] < eps))
}

/// Lowest index among minima.
fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(j);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub variant: Variant,
    pub clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl KMeansOptions {
    pub fn new(variant: Variant, clusters: usize, seed: u64) -> Self {
        Self {
            variant,
            clusters,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

struct Representative {
    matrix: DenseMatrix,
    factor: DenseFactor,
}

fn distance(variant: Variant, a: &DenseMatrix, rep: &Representative) -> Result<f64> {
    match variant {
        Variant::Entrywise => entrywise_l1_distance(a, &rep.matrix),
        Variant::Spectral | Variant::VarianceMinimizing => spectral_distance(a, &rep.factor),
    }
}

struct Refined {
    reps: Vec<Representative>,
    phi: Vec<usize>,
    iterations: usize,
    converged: bool,
}

/// Nearest representative for every patch and the distance to it.
fn assign(patches: &[DenseMatrix], reps: &[Representative], variant: Variant) -> Result<(Vec<usize>, Vec<f64>)> {
    let pairs: Vec<(usize, f64)> = patches
        .par_iter()
        .map(|a| {
            let d: Vec<f64> = reps.iter().map(|r| distance(variant, a, r)).collect::<Result<_>>()?;
            let j = argmin(&d).expect("at least one representative");
            Ok((j, d[j]))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Moves the patch farthest from its representative into each empty cluster,
/// never emptying a donor cluster.
fn reseed_empty(phi: &mut [usize], dists: &mut [f64], clusters: usize) {
    let mut sizes = vec![0usize; clusters];
    for &j in phi.iter() {
        sizes[j] += 1;
    }
    for j in 0..clusters {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for k in 0..phi.len() {
            if sizes[phi[k]] > 1 && best.is_none_or(|b| dists[k] > dists[b]) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            sizes[phi[k]] -= 1;
            sizes[j] += 1;
            phi[k] = j;
            dists[k] = 0.0;
        }
    }
}

fn recompute(
    patches: &[DenseMatrix],
    phi: &[usize],
    clusters: usize,
    variant: Variant,
    patch_factors: &PatchFactors,
) -> Result<Vec<Option<Representative>>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (k, &j) in phi.iter().enumerate() {
        members[j].push(k);
    }
    members
        .par_iter()
        .enumerate()
        .map(|(j, m)| {
            if m.is_empty() {
                return Ok(None);
            }
            let rep = match variant {
                Variant::Entrywise | Variant::Spectral => {
                    let mean = entrywise_mean(m.iter().map(|&k| &patches[k]))?;
                    let factor = lu_factor(&mean).map_err(|e| Error::ClusterFactor {
                        cluster: j,
                        source: Box::new(e),
                    })?;
                    Representative { matrix: mean, factor }
                }
                Variant::VarianceMinimizing => {
                    let k = variance_minimizer(patches, m, patch_factors)?;
                    Representative {
                        matrix: patches[k].clone(),
                        factor: patch_factors.get(k, &patches[k])?.clone(),
                    }
                }
            };
            Ok(Some(rep))
        })
        .collect()
}

/// Member `c` minimizing `sum_k d(A_k, A_c)^2` over the cluster.
fn variance_minimizer(patches: &[DenseMatrix], members: &[usize], pf: &PatchFactors) -> Result<usize> {
    if members.len() <= 2 {
        return Ok(members[0]);
    }
    let scores: Vec<f64> = members
        .par_iter()
        .map(|&c| {
            let fc = pf.get(c, &patches[c])?;
            members
                .iter()
                .map(|&k| spectral_distance(&patches[k], fc).map(|d| d * d))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    Ok(members[argmin(&scores).expect("nonempty cluster")])
}

/// Lazily computed per-patch factors.
struct PatchFactors {
    cells: Vec<std::sync::OnceLock<DenseFactor>>,
}

impl PatchFactors {
    fn new(n: usize) -> Self {
        Self {
            cells: (0..n).map(|_| std::sync::OnceLock::new()).collect(),
        }
    }

    fn seeded(n: usize, known: impl IntoIterator<Item = (usize, DenseFactor)>) -> Self {
        let pf = Self::new(n);
        for (k, f) in known {
            let _ = pf.cells[k].set(f);
        }
        pf
    }

    fn get(&self, k: usize, m: &DenseMatrix) -> Result<&DenseFactor> {
        if let Some(f) = self.cells[k].get() {
            return Ok(f);
        }
        let f = factor_patch(k, m)?;
        Ok(self.cells[k].get_or_init(|| f))
    }
}

fn refine(
    patches: &[DenseMatrix],
    mut reps: Vec<Representative>,
    mut phi: Vec<usize>,
    variant: Variant,
    max_iters: usize,
    patch_factors: &PatchFactors,
) -> Result<Refined> {
    let clusters = reps.len();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let (new_phi, mut dists) = assign(patches, &reps, variant)?;
        iterations += 1;
        if new_phi == phi {
            converged = true;
            break;
        }
        phi = new_phi;
        reseed_empty(&mut phi, &mut dists, clusters);
        let fresh = recompute(patches, &phi, clusters, variant, patch_factors)?;
        for (slot, rep) in reps.iter_mut().zip(fresh) {
            if let Some(r) = rep {
                *slot = r;
            }
        }
    }
    Ok(Refined {
        reps,
        phi,
        iterations,
        converged,
    })
}

/// Drops entries no patch maps to and renumbers `phi`.
fn prune(reps: Vec<Representative>, phi: Vec<usize>) -> (Vec<DbEntry>, Vec<usize>) {
    let mut used = vec![false; reps.len()];
    for &j in &phi {
        used[j] = true;
    }
    let mut remap = vec![usize::MAX; reps.len()];
    let mut entries = Vec::new();
    for (j, r) in reps.into_iter().enumerate() {
        if used[j] {
            remap[j] = entries.len();
            entries.push(DbEntry::new(r.matrix, r.factor));
        }
    }
    let phi = phi.into_iter().map(|j| remap[j]).collect();
    (entries, phi)
}

/// k-means over patch matrices, seeded by a random subset of the patches.
/// Callers are expected to pre-partition by boundary pattern.
pub fn kmeans(patches: &[DenseMatrix], opts: KMeansOptions) -> Result<Database> {
    check_patches(patches)?;
    let n = patches.len();
    if opts.clusters == 0 || opts.clusters > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {} outside 1..={n}",
            opts.clusters
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = rand::seq::index::sample(&mut rng, n, opts.clusters).into_vec();
    let init_factors: Vec<DenseFactor> = init
        .par_iter()
        .map(|&k| factor_patch(k, &patches[k]))
        .collect::<Result<_>>()?;
    let reps = init
        .iter()
        .zip(&init_factors)
        .map(|(&k, f)| Representative {
            matrix: patches[k].clone(),
            factor: f.clone(),
        })
        .collect();
    let pf = PatchFactors::seeded(n, init.iter().copied().zip(init_factors));
    let refined = refine(patches, reps, vec![usize::MAX; n], opts.variant, opts.max_iters, &pf)?;
    let (entries, phi) = prune(refined.reps, refined.phi);
    Database::new(
        entries,
        phi,
        Method::KMeans {
            variant: opts.variant,
            clusters: opts.clusters,
            seed: opts.seed,
            iterations: refined.iterations,
            converged: refined.converged,
        },
    )
}

/// Greedy spectral tolerance matching supplies the initial clusters, which
/// k-means then refines.
pub fn bootstrapped(patches: &[DenseMatrix], eps: f64, variant: Variant, max_iters: usize) -> Result<Database> {
    bootstrap_from(patches, greedy_tolerance(patches, eps, Flavor::Spectral)?, variant, max_iters)
}

/// Refines an existing database, e.g. one sized by [`greedy_for_size`].
pub fn bootstrap_from(patches: &[DenseMatrix], initial: Database, variant: Variant, max_iters: usize) -> Result<Database> {
    if initial.num_patches() != patches.len() {
        return Err(Error::DimensionMismatch {
            expected: initial.num_patches(),
            found: patches.len(),
        });
    }
    let eps = match initial.method {
        Method::Greedy { eps, .. } | Method::Bootstrapped { eps, .. } => eps,
        _ => f64::NAN,
    };
    let Database { entries, phi, .. } = initial;
    let pf = PatchFactors::new(patches.len());
    let reps = entries
        .into_iter()
        .map(|e| Representative {
            matrix: e.representative,
            factor: e.factor,
        })
        .collect();
    let refined = refine(patches, reps, phi, variant, max_iters, &pf)?;
    let (entries, phi) = prune(refined.reps, refined.phi);
    Database::new(
        entries,
        phi,
        Method::Bootstrapped {
            variant,
            eps,
            iterations: refined.iterations,
            converged: refined.converged,
        },
    )
}

/// Storage/accuracy trade-off `beta |B| + sum_k ‖I − A_k B_phi(k)⁻¹‖₂²`.
pub fn evaluate_objective(db: &Database, patches: &[DenseMatrix], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if patches.len() != db.num_patches() {
        return Err(Error::DimensionMismatch {
            expected: db.num_patches(),
            found: patches.len(),
        });
    }
    let terms: Vec<f64> = patches
        .par_iter()
        .enumerate()
        .map(|(k, a)| spectral_distance(a, db.factor_for(k)).map(|d| d * d))
        .collect::<Result<_>>()?;
    Ok(beta * db.len() as f64 + terms.iter().sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub db_size: usize,
    pub ratio: f64,
}

/// Greedy compression ratio for each tolerance in an ascending grid.
pub fn compressibility_curve(patches: &[DenseMatrix], eps_grid: &[f64], flavor: Flavor) -> Result<Vec<CurvePoint>> {
    if eps_grid.iter().any(|&e| !(e > 0.0)) || eps_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("tolerance grid must be positive and ascending".into()));
    }
    eps_grid
        .iter()
        .map(|&eps| {
            let db = greedy_tolerance(patches, eps, flavor)?;
            Ok(CurvePoint {
                eps,
                db_size: db.len(),
                ratio: db.compression_ratio(),
            })
        })
        .collect()
}

/// Splits `budget` across groups proportionally to their sizes by largest
/// remainder, giving every group at least one slot and at most its size.
pub fn split_budget(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    if budget < sizes.len() {
        return Err(Error::BudgetTooSmall {
            budget,
            partitions: sizes.len(),
        });
    }
    let total: usize = sizes.iter().sum();
    let quota: Vec<f64> = sizes
        .iter()
        .map(|&s| budget as f64 * s as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quota
        .iter()
        .zip(sizes)
        .map(|(&q, &s)| (q.floor() as usize).max(1).min(s))
        .collect();
    loop {
        let sum: usize = alloc.iter().sum();
        if sum < budget {
            let pick = (0..sizes.len())
                .filter(|&g| alloc[g] < sizes[g])
                .fold(None, |best: Option<usize>, g| match best {
                    Some(b) if quota[b] - alloc[b] as f64 >= quota[g] - alloc[g] as f64 => Some(b),
                    _ => Some(g),
                });
            match pick {
                Some(g) => alloc[g] += 1,
                None => break,
            }
        } else if sum > budget {
            let pick = (0..sizes.len())
                .filter(|&g| alloc[g] > 1)
                .fold(None, |best: Option<usize>, g| match best {
                    Some(b) if quota[b] - alloc[b] as f64 <= quota[g] - alloc[g] as f64 => Some(b),
                    _ => Some(g),
                });
            match pick {
                Some(g) => alloc[g] -= 1,
                None => break,
            }
        } else {
            break;
        }
    }
    Ok(alloc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub variant: Variant,
    pub seed: u64,
    pub max_iters: usize,
}

/// Clusters each boundary-pattern partition with its share of `budget` and
/// concatenates the resulting databases.
pub fn partitioned_build(patches: &[DenseMatrix], budget: usize, params: ClusterParams) -> Result<Database> {
    check_patches(patches)?;
    let groups = boundary_partition(patches);
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let shares = split_budget(&sizes, budget)?;
    let mut entries = Vec::new();
    let mut phi = vec![0usize; patches.len()];
    for (g, ((pattern, members), &share)) in groups.iter().zip(&shares).enumerate() {
        let subset: Vec<DenseMatrix> = members.iter().map(|&k| patches[k].clone()).collect();
        let opts = KMeansOptions {
            variant: params.variant,
            clusters: share,
            seed: params.seed.wrapping_add(g as u64),
            max_iters: params.max_iters,
        };
        let db = kmeans(&subset, opts)?;
        let offset = entries.len();
        for (&k, &j) in members.iter().zip(db.phi()) {
            phi[k] = offset + j;
        }
        entries.extend(db.entries.into_iter().map(|mut e| {
            e.partition = Some(pattern.clone());
            e
        }));
    }
    Database::new(
        entries,
        phi,
        Method::Partitioned {
            budget,
            partitions: sizes.len(),
            variant: params.variant,
            seed: params.seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, Coefficient, StructuredMesh};
    use crate::patch::{detect_patches, extract_all};
    use rand::Rng;

    fn diag(n: usize, v: f64) -> DenseMatrix {
        DenseMatrix::from_diagonal(&vec![v; n])
    }

    fn perturbed(rng: &mut ChaCha8Rng, base: f64, n: usize, noise: f64) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |i, j| {
            let e = rng.gen_range(-noise..noise);
            if i == j {
                base + e
            } else {
                e
            }
        })
    }

    fn assembled_patches(cells: usize, degree: usize, coeff: Coefficient) -> Vec<DenseMatrix> {
        let mesh = StructuredMesh::square(cells, degree).unwrap();
        let prob = assemble(&mesh, &coeff).unwrap();
        let ps = detect_patches(&prob.matrix, mesh.dofs_per_cell()).unwrap();
        extract_all(&prob.matrix, &ps).unwrap()
    }

    #[test]
    fn identical_patches_collapse() {
        let ps = vec![diag(3, 2.0); 6];
        for flavor in [Flavor::Spectral, Flavor::EntrywiseL1] {
            let db = greedy_tolerance(&ps, 1e-12, flavor).unwrap();
            assert_eq!(db.len(), 1);
            assert!(db.phi().iter().all(|&j| j == 0));
        }
    }

    #[test]
    fn distinct_patches_stay_distinct() {
        let ps: Vec<DenseMatrix> = (1..=5).map(|v| diag(2, v as f64)).collect();
        let db = greedy_tolerance(&ps, 1e-9, Flavor::Spectral).unwrap();
        assert_eq!(db.len(), 5);
        assert_eq!(db.phi(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn greedy_rejects_bad_tolerance() {
        assert!(greedy_tolerance(&[diag(2, 1.0)], 0.0, Flavor::Spectral).is_err());
        assert!(greedy_tolerance(&[], 1.0, Flavor::Spectral).is_err());
    }

    #[test]
    fn greedy_reports_singular_patch() {
        let ps = vec![diag(2, 1.0), DenseMatrix::zeros(2, 2)];
        match greedy_tolerance(&ps, 1e-3, Flavor::Spectral) {
            Err(Error::PatchFactor { patch: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn greedy_match_postcondition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<DenseMatrix> = (0..40).map(|k| perturbed(&mut rng, 1.0 + (k % 4) as f64, 4, 0.05)).collect();
        for flavor in [Flavor::Spectral, Flavor::EntrywiseL1] {
            let eps = 0.2;
            let db = greedy_tolerance(&ps, eps, flavor).unwrap();
            let mut appended = 0;
            for (i, a) in ps.iter().enumerate() {
                let j = db.phi()[i];
                let e = &db.entries()[j];
                let d = match flavor {
                    Flavor::Spectral => spectral_distance(a, &e.factor).unwrap(),
                    Flavor::EntrywiseL1 => entrywise_l1_distance(a, &e.representative).unwrap(),
                };
                if j == appended {
                    assert!(d < 1e-10);
                    appended += 1;
                } else {
                    assert!(j < appended);
                    assert!(d < eps);
                }
            }
            assert!(db.is_onto());
        }
    }

    #[test]
    fn best_match_picks_closest() {
        let ps = vec![diag(2, 1.0), diag(2, 1.5), diag(2, 1.4)];
        let first = greedy_tolerance_with(&ps, 0.9, GreedyOptions::first_match(Flavor::EntrywiseL1)).unwrap();
        assert_eq!(first.phi(), &[0, 1, 0]);
        let opts = GreedyOptions {
            flavor: Flavor::EntrywiseL1,
            best_match: true,
        };
        let best = greedy_tolerance_with(&ps, 0.9, opts).unwrap();
        assert_eq!(best.phi(), &[0, 1, 1]);
    }

    #[test]
    fn greedy_size_search() {
        let ps: Vec<DenseMatrix> = (0..40).map(|k| diag(2, 1.0 + 0.05 * k as f64)).collect();
        for target in [1, 5, 10, 14, 40] {
            let db = greedy_for_size(&ps, target, Flavor::EntrywiseL1, 0.0).unwrap();
            assert_eq!(db.len(), target, "target {target}");
        }
        let db = greedy_for_size(&ps, 20, Flavor::Spectral, 0.1).unwrap();
        assert!(db.len().abs_diff(20) <= 2);
    }

    #[test]
    fn capped_greedy_gives_up() {
        let ps: Vec<DenseMatrix> = (1..=5).map(|v| diag(2, v as f64)).collect();
        let opts = GreedyOptions::first_match(Flavor::Spectral);
        assert!(greedy_capped(&ps, 1e-9, opts, 4).unwrap().is_none());
        assert_eq!(greedy_capped(&ps, 1e-9, opts, 5).unwrap().unwrap().len(), 5);
    }

    #[test]
    fn constant_coefficient_square_gives_nine_entries() {
        let ps = assembled_patches(4, 2, Coefficient::constant());
        let db = greedy_tolerance(&ps, 1e-7, Flavor::EntrywiseL1).unwrap();
        assert_eq!(db.len(), 9);
    }

    #[test]
    fn kmeans_one_cluster_per_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps: Vec<DenseMatrix> = (0..6).map(|_| perturbed(&mut rng, 3.0, 3, 0.5)).collect();
        for variant in [Variant::Entrywise, Variant::Spectral, Variant::VarianceMinimizing] {
            let db = kmeans(&ps, KMeansOptions::new(variant, 6, 9)).unwrap();
            assert_eq!(db.len(), 6);
            let mut seen = db.phi().to_vec();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
            match db.method() {
                Method::KMeans { converged, iterations, .. } => {
                    assert!(*converged);
                    assert_eq!(*iterations, 2);
                }
                m => panic!("{m:?}"),
            }
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps: Vec<DenseMatrix> = (0..5).map(|_| perturbed(&mut rng, 3.0, 3, 0.5)).collect();
        let db = kmeans(&ps, KMeansOptions::new(Variant::Entrywise, 1, 0)).unwrap();
        assert!(db.phi().iter().all(|&j| j == 0));
        let mean = entrywise_mean(&ps).unwrap();
        assert!(entrywise_l1_distance(&db.entries()[0].representative, &mean).unwrap() < 1e-14);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps: Vec<DenseMatrix> = (0..30).map(|k| perturbed(&mut rng, 1.0 + (k % 3) as f64, 4, 0.3)).collect();
        for variant in [Variant::Entrywise, Variant::Spectral, Variant::VarianceMinimizing] {
            let a = kmeans(&ps, KMeansOptions::new(variant, 4, 17)).unwrap();
            let b = kmeans(&ps, KMeansOptions::new(variant, 4, 17)).unwrap();
            assert_eq!(a.phi(), b.phi());
            for (x, y) in a.entries().iter().zip(b.entries()) {
                assert_eq!(x.representative, y.representative);
            }
        }
    }

    #[test]
    fn kmeans_fixed_point_on_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps: Vec<DenseMatrix> = (0..25).map(|k| perturbed(&mut rng, 1.0 + (k % 5) as f64, 3, 0.4)).collect();
        for variant in [Variant::Entrywise, Variant::Spectral] {
            let db = kmeans(&ps, KMeansOptions::new(variant, 5, 3)).unwrap();
            if let Method::KMeans { converged: true, .. } = db.method() {
                let reps: Vec<Representative> = db
                    .entries()
                    .iter()
                    .map(|e| Representative {
                        matrix: e.representative.clone(),
                        factor: e.factor.clone(),
                    })
                    .collect();
                let (phi, _) = assign(&ps, &reps, variant).unwrap();
                assert_eq!(phi, db.phi());
            }
        }
    }

    #[test]
    fn kmeans_respects_iteration_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps: Vec<DenseMatrix> = (0..40).map(|_| perturbed(&mut rng, 2.0, 3, 1.0)).collect();
        let mut opts = KMeansOptions::new(Variant::Entrywise, 6, 1);
        opts.max_iters = 1;
        let db = kmeans(&ps, opts).unwrap();
        assert!(matches!(db.method(), Method::KMeans { iterations: 1, converged: false, .. }));
        assert!(db.is_onto());
    }

    #[test]
    fn reseed_fills_empty_clusters() {
        let mut phi = vec![0, 0, 0, 1];
        let mut d = vec![0.1, 0.9, 0.5, 0.0];
        reseed_empty(&mut phi, &mut d, 3);
        assert_eq!(phi, vec![0, 2, 0, 1]);
    }

    #[test]
    fn bootstrapped_identical_patches() {
        let ps = vec![diag(3, 2.0); 5];
        let db = bootstrapped(&ps, 1e-6, Variant::VarianceMinimizing, 10).unwrap();
        assert_eq!(db.len(), 1);
        assert!(matches!(db.method(), Method::Bootstrapped { iterations: 1, converged: true, .. }));
    }

    #[test]
    fn bootstrapped_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ps: Vec<DenseMatrix> = (0..30).map(|k| perturbed(&mut rng, 1.0 + (k % 3) as f64, 4, 0.1)).collect();
        let greedy = greedy_tolerance(&ps, 0.3, Flavor::Spectral).unwrap();
        for variant in [Variant::Entrywise, Variant::Spectral, Variant::VarianceMinimizing] {
            let db = bootstrapped(&ps, 0.3, variant, 20).unwrap();
            assert!(db.len() <= greedy.len());
            assert!(db.is_onto());
        }
    }

    #[test]
    fn objective_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ps: Vec<DenseMatrix> = (0..5).map(|_| perturbed(&mut rng, 3.0, 3, 0.5)).collect();
        let exact = Database::identity(&ps).unwrap();
        let l = evaluate_objective(&exact, &ps, 0.5).unwrap();
        assert!((l - 0.5 * 5.0).abs() < 1e-12);

        let same = vec![diag(3, 2.0); 4];
        let db = greedy_tolerance(&same, 1e-9, Flavor::Spectral).unwrap();
        assert!((evaluate_objective(&db, &same, 2.0).unwrap() - 2.0).abs() < 1e-14);

        let db = kmeans(&ps, KMeansOptions::new(Variant::Spectral, 2, 1)).unwrap();
        let mut naive = 0.7 * db.len() as f64;
        for (k, a) in ps.iter().enumerate() {
            let d = spectral_distance(a, &db.entries()[db.phi()[k]].factor).unwrap();
            naive += d * d;
        }
        assert!((evaluate_objective(&db, &ps, 0.7).unwrap() - naive).abs() < 1e-10);
        assert!(evaluate_objective(&db, &ps, 0.0).is_err());
    }

    #[test]
    fn curve_edge_cases() {
        let same = vec![diag(2, 1.0); 8];
        let curve = compressibility_curve(&same, &[1e-3, 1.0], Flavor::EntrywiseL1).unwrap();
        assert!(curve.iter().all(|p| (p.ratio - 7.0 / 8.0).abs() < 1e-15));

        let far: Vec<DenseMatrix> = (0..6).map(|k| diag(2, 10.0 * (k + 1) as f64)).collect();
        let curve = compressibility_curve(&far, &[1.0], Flavor::EntrywiseL1).unwrap();
        assert_eq!(curve[0].ratio, 0.0);

        assert!(compressibility_curve(&far, &[1.0, 0.5], Flavor::EntrywiseL1).is_err());
    }

    #[test]
    fn budget_split_cases() {
        assert_eq!(split_budget(&[10], 4).unwrap(), vec![4]);
        assert_eq!(split_budget(&[5; 9], 9).unwrap(), vec![1; 9]);
        assert!(matches!(split_budget(&[5; 9], 8), Err(Error::BudgetTooSmall { .. })));
        let s = split_budget(&[1, 1, 100], 10).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 10);
        assert_eq!(s, vec![1, 1, 8]);
        // never more clusters than members
        assert_eq!(split_budget(&[2, 2], 10).unwrap(), vec![2, 2]);
    }

    #[test]
    fn partitioned_single_group_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ps: Vec<DenseMatrix> = (0..12).map(|k| perturbed(&mut rng, 1.0 + (k % 3) as f64, 3, 0.2)).collect();
        let params = ClusterParams {
            variant: Variant::Spectral,
            seed: 5,
            max_iters: 30,
        };
        let part = partitioned_build(&ps, 3, params).unwrap();
        let direct = kmeans(&ps, KMeansOptions::new(Variant::Spectral, 3, 5)).unwrap();
        assert_eq!(part.phi(), direct.phi());
    }

    #[test]
    fn partitioned_nine_groups() {
        let ps = assembled_patches(4, 2, Coefficient::Smooth);
        let params = ClusterParams {
            variant: Variant::Entrywise,
            seed: 42,
            max_iters: 20,
        };
        let db = partitioned_build(&ps, 9, params).unwrap();
        assert_eq!(db.len(), 9);
        assert!(db.is_onto());
        // each entry serves exactly one boundary pattern
        for (k, &j) in db.phi().iter().enumerate() {
            assert_eq!(db.entries()[j].partition.as_ref().unwrap(), &BoundaryPattern::of(&ps[k]));
        }
        assert!(matches!(partitioned_build(&ps, 8, params), Err(Error::BudgetTooSmall { .. })));
    }

    #[test]
    fn database_new_enforces_onto() {
        let f = lu_factor(&diag(2, 1.0)).unwrap();
        let e = || DbEntry::new(diag(2, 1.0), f.clone());
        assert!(Database::new(vec![e(), e()], vec![0, 0], Method::Identity).is_err());
        assert!(Database::new(vec![e()], vec![1], Method::Identity).is_err());
    }
}
