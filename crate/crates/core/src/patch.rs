//! Cell-restricted patch detection from matrix structure alone, patch
//! extraction, overlap weights, and boundary-pattern partitioning.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Patches of one common size together with the overlap weights `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patches: Vec<Vec<usize>>,
    patch_size: usize,
    weights: Vec<f64>,
}

impl PatchSet {
    /// Builds a patch set over `n` unknowns. Each patch must hold `patch_size`
    /// distinct indices below `n`; they are stored sorted.
    pub fn new(n: usize, patch_size: usize, patches: Vec<Vec<usize>>) -> Result<Self> {
        let mut counts = vec![0usize; n];
        let mut sorted_patches = Vec::with_capacity(patches.len());
        for mut p in patches {
            if p.len() != patch_size {
                return Err(Error::DimensionMismatch {
                    expected: patch_size,
                    found: p.len(),
                });
            }
            p.sort_unstable();
            for w in p.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::DuplicateIndex(w[0]));
                }
            }
            for &i in &p {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, n });
                }
                counts[i] += 1;
            }
            sorted_patches.push(p);
        }
        let weights = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        Ok(Self {
            patches: sorted_patches,
            patch_size,
            weights,
        })
    }

    /// No patches; every weight is zero.
    pub fn empty(n: usize) -> Self {
        Self {
            patches: Vec::new(),
            patch_size: 0,
            weights: vec![0.0; n],
        }
    }

    pub fn patches(&self) -> &[Vec<usize>] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "p_s": self.patch_size, "patches": self.patches })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), &self.to_json())?;
        Ok(())
    }
}

/// Finds cell-restricted patches: the column sets of rows holding exactly
/// `patch_size` stored entries.
///
/// A candidate set is kept only if every candidate row it contains has the
/// same column set. Sets are deduplicated and ordered by their smallest index.
pub fn detect_patches(a: &SparseMatrix, patch_size: usize) -> Result<PatchSet> {
    if patch_size < 2 {
        return Err(Error::InvalidArgument("patch size must be at least 2".into()));
    }
    if !a.is_square() {
        return Err(Error::NonSquareMatrix {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let n = a.n();
    let candidate: Vec<bool> = (0..n).map(|i| a.row_nnz(i) == patch_size).collect();
    if !candidate.iter().any(|&c| c) {
        return Err(Error::NoPatchesFound { patch_size });
    }
    let mut seen: HashSet<&[usize]> = HashSet::new();
    let mut patches: Vec<Vec<usize>> = Vec::new();
    for i in (0..n).filter(|&i| candidate[i]) {
        let cols = a.row(i).0;
        if seen.contains(cols) {
            continue;
        }
        let consistent = cols
            .iter()
            .filter(|&&j| candidate[j])
            .all(|&j| a.row(j).0 == cols);
        if consistent {
            seen.insert(cols);
            patches.push(cols.to_vec());
        }
    }
    if patches.is_empty() {
        return Err(Error::NoPatchesFound { patch_size });
    }
    patches.sort_unstable_by(|x, y| x[0].cmp(&y[0]).then_with(|| x.cmp(y)));
    PatchSet::new(n, patch_size, patches)
}

/// `A_k = V_k A V_kᵀ` for every patch, in patch order.
pub fn extract_all(a: &SparseMatrix, ps: &PatchSet) -> Result<Vec<DenseMatrix>> {
    ps.patches()
        .par_iter()
        .map(|idx| a.extract_submatrix(idx))
        .collect()
}

/// Local rows that hold a single nonzero (Dirichlet rows).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundaryPattern(Vec<bool>);

impl BoundaryPattern {
    pub fn of(m: &DenseMatrix) -> Self {
        Self((0..m.rows()).map(|i| m.row_nonzeros(i) == 1).collect())
    }

    pub fn mask(&self) -> &[bool] {
        &self.0
    }

    pub fn is_interior(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn boundary_rows(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Compact string form, `1` for boundary rows.
    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Groups patch indices by boundary pattern. Keys are ordered, so the
/// all-interior pattern comes first.
pub fn boundary_partition(patch_matrices: &[DenseMatrix]) -> BTreeMap<BoundaryPattern, Vec<usize>> {
    let mut groups: BTreeMap<BoundaryPattern, Vec<usize>> = BTreeMap::new();
    for (k, m) in patch_matrices.iter().enumerate() {
        groups.entry(BoundaryPattern::of(m)).or_default().push(k);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, Coefficient, StructuredMesh};

    fn block_diag() -> SparseMatrix {
        let mut t = Vec::new();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    t.push((3 * b + i, 3 * b + j, if i == j { 4.0 } else { -1.0 }));
                }
            }
        }
        SparseMatrix::from_triplets(6, 6, &t).unwrap()
    }

    #[test]
    fn two_by_two_quadratic_mesh_gives_cells() {
        let mesh = StructuredMesh::square(2, 2).unwrap();
        let prob = assemble(&mesh, &Coefficient::constant()).unwrap();
        let ps = detect_patches(&prob.matrix, 9).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps.patches(), prob.cell_dof_sets().as_slice());
    }

    #[test]
    fn block_diagonal_patches() {
        let a = block_diag();
        let ps = detect_patches(&a, 3).unwrap();
        assert_eq!(ps.patches(), &[vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(ps.weights().iter().all(|&w| w == 1.0));
        let mats = extract_all(&a, &ps).unwrap();
        for (b, m) in mats.iter().enumerate() {
            assert_eq!(m, &DenseMatrix::from_fn(3, 3, |i, j| a.get(3 * b + i, 3 * b + j)));
        }
    }

    #[test]
    fn diagonal_has_no_patches() {
        let a = SparseMatrix::identity(5);
        assert!(matches!(
            detect_patches(&a, 2),
            Err(Error::NoPatchesFound { patch_size: 2 })
        ));
    }

    #[test]
    fn single_dense_patch_extracts_whole_matrix() {
        let d = DenseMatrix::from_fn(4, 4, |i, j| if i == j { 5.0 } else { 1.0 / (1 + i + j) as f64 });
        let a = SparseMatrix::from_dense(&d);
        let ps = detect_patches(&a, 4).unwrap();
        assert_eq!(extract_all(&a, &ps).unwrap(), vec![d]);
    }

    #[test]
    fn detection_reproduces_cells_for_all_degrees() {
        for p in 2..=5 {
            for coeff in [Coefficient::constant(), Coefficient::Smooth, Coefficient::default_piecewise()] {
                let mesh = StructuredMesh::square(4, p).unwrap();
                let prob = assemble(&mesh, &coeff).unwrap();
                let ps = detect_patches(&prob.matrix, mesh.dofs_per_cell()).unwrap();
                assert_eq!(ps.patches(), prob.cell_dof_sets().as_slice(), "p={p}");
            }
        }
    }

    #[test]
    fn degree_one_has_no_cell_rows() {
        let mesh = StructuredMesh::square(4, 1).unwrap();
        let prob = assemble(&mesh, &Coefficient::constant()).unwrap();
        assert!(matches!(detect_patches(&prob.matrix, 4), Err(Error::NoPatchesFound { .. })));
    }

    #[test]
    fn weights_invert_coverage() {
        let mesh = StructuredMesh::square(3, 3).unwrap();
        let prob = assemble(&mesh, &Coefficient::Smooth).unwrap();
        let ps = detect_patches(&prob.matrix, 16).unwrap();
        let mut coverage = vec![0.0; ps.dim()];
        for p in ps.patches() {
            for &i in p {
                coverage[i] += 1.0;
            }
        }
        for (c, w) in coverage.iter().zip(ps.weights()) {
            if *c > 0.0 {
                assert!((c * w - 1.0).abs() < 1e-15);
            } else {
                assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn detection_ignores_triplet_order() {
        let mesh = StructuredMesh::square(3, 2).unwrap();
        let a = assemble(&mesh, &Coefficient::Smooth).unwrap().matrix;
        let mut t = Vec::new();
        for i in 0..a.n() {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                t.push((i, c, v));
            }
        }
        t.reverse();
        let shuffled = SparseMatrix::from_triplets(a.n(), a.n(), &t).unwrap();
        assert_eq!(detect_patches(&a, 9).unwrap(), detect_patches(&shuffled, 9).unwrap());
    }

    #[test]
    fn nine_partitions_in_two_dimensions() {
        for cells in [3, 5] {
            let mesh = StructuredMesh::square(cells, 2).unwrap();
            let prob = assemble(&mesh, &Coefficient::constant()).unwrap();
            let ps = detect_patches(&prob.matrix, 9).unwrap();
            let parts = boundary_partition(&extract_all(&prob.matrix, &ps).unwrap());
            assert_eq!(parts.len(), 9);
            let interior = parts.iter().next().unwrap();
            assert!(interior.0.is_interior());
            assert_eq!(interior.1.len(), (cells - 2) * (cells - 2));
        }
    }

    #[test]
    fn twenty_seven_partitions_in_three_dimensions() {
        let mesh = StructuredMesh::cube(3, 2).unwrap();
        let prob = assemble(&mesh, &Coefficient::constant()).unwrap();
        let ps = detect_patches(&prob.matrix, 27).unwrap();
        assert_eq!(ps.len(), 27);
        let parts = boundary_partition(&extract_all(&prob.matrix, &ps).unwrap());
        assert_eq!(parts.len(), 27);
    }

    #[test]
    fn interior_only_patches_form_one_partition() {
        let a = block_diag();
        let ps = detect_patches(&a, 3).unwrap();
        assert_eq!(boundary_partition(&extract_all(&a, &ps).unwrap()).len(), 1);
    }

    #[test]
    fn rejects_malformed_patch_sets() {
        assert!(matches!(PatchSet::new(4, 2, vec![vec![0, 0]]), Err(Error::DuplicateIndex(0))));
        assert!(matches!(PatchSet::new(4, 2, vec![vec![0, 9]]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(PatchSet::new(4, 2, vec![vec![0]]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn json_export_shape() {
        let ps = PatchSet::new(4, 2, vec![vec![1, 0], vec![2, 3]]).unwrap();
        assert_eq!(ps.to_json(), serde_json::json!({"p_s": 2, "patches": [[0, 1], [2, 3]]}));
    }
}
