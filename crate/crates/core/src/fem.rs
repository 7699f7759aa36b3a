//! Tensor-product Lagrange finite elements for `-div(rho grad u) = f` on the
//! unit square or cube, plus the bilinear coarse space used by the additive
//! two-level preconditioner.
//!
//! Degrees of freedom live on the equispaced node lattice with
//! `cells * degree + 1` nodes per axis and are numbered lexicographically
//! with `x` fastest. Dirichlet rows are replaced by unit rows; their columns
//! are kept, so boundary rows inside a cell patch have exactly one nonzero.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

const CELL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredMesh {
    pub dim: usize,
    pub cells: usize,
    pub degree: usize,
}

impl StructuredMesh {
    pub fn new(dim: usize, cells: usize, degree: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("dimension {dim} not supported")));
        }
        if cells == 0 {
            return Err(Error::InvalidArgument("mesh needs at least one cell".into()));
        }
        if degree == 0 {
            return Err(Error::InvalidDegree(degree));
        }
        Ok(Self { dim, cells, degree })
    }

    pub fn square(cells: usize, degree: usize) -> Result<Self> {
        Self::new(2, cells, degree)
    }

    pub fn cube(cells: usize, degree: usize) -> Result<Self> {
        Self::new(3, cells, degree)
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.cells * self.degree + 1
    }

    pub fn num_dofs(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    /// DoFs per cell, `(p+1)^d`.
    pub fn dofs_per_cell(&self) -> usize {
        (self.degree + 1).pow(self.dim as u32)
    }

    pub fn h(&self) -> f64 {
        1.0 / self.cells as f64
    }

    fn split(&self, mut id: usize, base: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for o in out.iter_mut().take(self.dim) {
            *o = id % base;
            id /= base;
        }
        out
    }

    fn join(&self, idx: [usize; 3], base: usize) -> usize {
        (0..self.dim).rev().fold(0, |acc, d| acc * base + idx[d])
    }

    pub fn dof_index(&self, dof: usize) -> [usize; 3] {
        self.split(dof, self.nodes_per_axis())
    }

    pub fn dof_coords(&self, dof: usize) -> [f64; 3] {
        let m = (self.cells * self.degree) as f64;
        let idx = self.dof_index(dof);
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = idx[d] as f64 / m;
        }
        x
    }

    pub fn is_boundary(&self, dof: usize) -> bool {
        let last = self.nodes_per_axis() - 1;
        let idx = self.dof_index(dof);
        (0..self.dim).any(|d| idx[d] == 0 || idx[d] == last)
    }

    pub fn boundary_dofs(&self) -> Vec<usize> {
        (0..self.num_dofs()).filter(|&i| self.is_boundary(i)).collect()
    }

    pub fn cell_index(&self, cell: usize) -> [usize; 3] {
        self.split(cell, self.cells)
    }

    /// Global DoFs of `cell` in local lexicographic order, which is also ascending.
    pub fn cell_dofs(&self, cell: usize) -> Vec<usize> {
        let c = self.cell_index(cell);
        let p = self.degree;
        let base = self.nodes_per_axis();
        local_indices(self.dim, p + 1)
            .map(|a| {
                let mut g = [0; 3];
                for d in 0..self.dim {
                    g[d] = c[d] * p + a[d];
                }
                self.join(g, base)
            })
            .collect()
    }

    /// Lower-left corner of `cell`.
    fn cell_origin(&self, cell: usize) -> [f64; 3] {
        let c = self.cell_index(cell);
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = c[d] as f64 * self.h();
        }
        x
    }
}

/// Lexicographic multi-indices over `[0, n)^dim`, first axis fastest.
fn local_indices(dim: usize, n: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..n.pow(dim as u32)).map(move |mut k| {
        let mut a = [0; 3];
        for slot in a.iter_mut().take(dim) {
            *slot = k % n;
            k /= n;
        }
        a
    })
}

/// Diffusion coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficient {
    /// `prod sin^2(pi x_d) + 0.1`
    Smooth,
    /// Axis-aligned blocks; `values` indexed lexicographically by block, x fastest.
    PiecewiseConstant { blocks: Vec<usize>, values: Vec<f64> },
    Constant {
        #[serde(default = "one")]
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for Coefficient {
    fn default() -> Self {
        Coefficient::Constant { value: 1.0 }
    }
}

impl Coefficient {
    pub fn constant() -> Self {
        Coefficient::Constant { value: 1.0 }
    }

    /// `nb x nb` checkerboard alternating `lo` and `hi`, starting with `lo` at the origin.
    pub fn checkerboard(nb: usize, lo: f64, hi: f64) -> Self {
        let values = (0..nb * nb)
            .map(|k| if (k % nb + k / nb) % 2 == 0 { lo } else { hi })
            .collect();
        Coefficient::PiecewiseConstant {
            blocks: vec![nb, nb],
            values,
        }
    }

    /// Default discontinuous layout: 4x4 blocks of 1 and 100.
    pub fn default_piecewise() -> Self {
        Self::checkerboard(4, 1.0, 100.0)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Coefficient::PiecewiseConstant { blocks, values } = self {
            if blocks.is_empty() || blocks.len() > dim || blocks.contains(&0) {
                return Err(Error::InvalidArgument(format!("bad block layout {blocks:?}")));
            }
            let count: usize = blocks.iter().product();
            if values.len() != count {
                return Err(Error::DimensionMismatch {
                    expected: count,
                    found: values.len(),
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64; 3], dim: usize) -> f64 {
        match self {
            Coefficient::Smooth => {
                (0..dim).map(|d| (PI * x[d]).sin().powi(2)).product::<f64>() + 0.1
            }
            Coefficient::Constant { value } => *value,
            Coefficient::PiecewiseConstant { blocks, values } => {
                let mut k = 0;
                for d in (0..blocks.len()).rev() {
                    let nb = blocks[d];
                    let b = ((x[d] * nb as f64).floor() as usize).min(nb - 1);
                    k = k * nb + b;
                }
                values[k]
            }
        }
    }

    /// Gradient; zero away from discontinuities for piecewise coefficients.
    pub fn gradient(&self, x: &[f64; 3], dim: usize) -> [f64; 3] {
        let mut g = [0.0; 3];
        if let Coefficient::Smooth = self {
            for d in 0..dim {
                let mut prod = 2.0 * PI * (PI * x[d]).sin() * (PI * x[d]).cos();
                for e in 0..dim {
                    if e != d {
                        prod *= (PI * x[e]).sin().powi(2);
                    }
                }
                g[d] = prod;
            }
        }
        g
    }
}

/// Manufactured solution `prod sin(pi x_d)`.
pub fn exact_u(x: &[f64; 3], dim: usize) -> f64 {
    (0..dim).map(|d| (PI * x[d]).sin()).product()
}

fn exact_grad_u(x: &[f64; 3], dim: usize) -> [f64; 3] {
    let mut g = [0.0; 3];
    for d in 0..dim {
        let mut prod = PI * (PI * x[d]).cos();
        for e in 0..dim {
            if e != d {
                prod *= (PI * x[e]).sin();
            }
        }
        g[d] = prod;
    }
    g
}

/// Source term `f = -grad(rho).grad(u) - rho lap(u)` for the manufactured solution.
pub fn source_term(coeff: &Coefficient, x: &[f64; 3], dim: usize) -> f64 {
    let rho = coeff.eval(x, dim);
    let grho = coeff.gradient(x, dim);
    let gu = exact_grad_u(x, dim);
    let u = exact_u(x, dim);
    let adv: f64 = (0..dim).map(|d| grho[d] * gu[d]).sum();
    -adv + rho * dim as f64 * PI * PI * u
}

/// Gauss-Legendre points and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pts = vec![0.0; n];
    let mut wts = vec![0.0; n];
    for i in 0..n {
        // Newton on P_n from the Chebyshev guess
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        pts[n - 1 - i] = 0.5 * (z + 1.0);
        wts[n - 1 - i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (pts, wts)
}

/// 1D Lagrange basis on equispaced nodes of `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    nodes: Vec<f64>,
}

impl LagrangeBasis {
    pub fn equispaced(degree: usize) -> Self {
        Self {
            nodes: (0..=degree).map(|i| i as f64 / degree as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, i: usize, x: f64) -> f64 {
        let xi = self.nodes[i];
        self.nodes
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &xj)| (x - xj) / (xi - xj))
            .product()
    }

    pub fn derivative(&self, i: usize, x: f64) -> f64 {
        let xi = self.nodes[i];
        let mut total = 0.0;
        for (k, &xk) in self.nodes.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut term = 1.0 / (xi - xk);
            for (j, &xj) in self.nodes.iter().enumerate() {
                if j != i && j != k {
                    term *= (x - xj) / (xi - xj);
                }
            }
            total += term;
        }
        total
    }
}

/// Basis values and reference gradients at tensor quadrature points.
struct ReferenceElement {
    dim: usize,
    nloc: usize,
    /// reference-cell quadrature points
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
    /// values[q * nloc + a]
    values: Vec<f64>,
    /// grads[(q * nloc + a) * dim + d]
    grads: Vec<f64>,
}

impl ReferenceElement {
    fn new(dim: usize, degree: usize, qpts_per_axis: usize) -> Self {
        let basis = LagrangeBasis::equispaced(degree);
        let (qx, qw) = gauss_legendre(qpts_per_axis);
        let np = degree + 1;
        let nloc = np.pow(dim as u32);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for q in local_indices(dim, qpts_per_axis) {
            let mut pt = [0.0; 3];
            let mut w = 1.0;
            for d in 0..dim {
                pt[d] = qx[q[d]];
                w *= qw[q[d]];
            }
            points.push(pt);
            weights.push(w);
            for a in local_indices(dim, np) {
                let v1: Vec<f64> = (0..dim).map(|d| basis.value(a[d], pt[d])).collect();
                let g1: Vec<f64> = (0..dim).map(|d| basis.derivative(a[d], pt[d])).collect();
                values.push(v1.iter().product());
                for d in 0..dim {
                    let mut g = g1[d];
                    for e in 0..dim {
                        if e != d {
                            g *= v1[e];
                        }
                    }
                    grads.push(g);
                }
            }
        }
        Self {
            dim,
            nloc,
            points,
            weights,
            values,
            grads,
        }
    }

    fn physical_point(&self, origin: &[f64; 3], h: f64, q: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = origin[d] + h * self.points[q][d];
        }
        x
    }

    fn stiffness(&self, coeff: &Coefficient, origin: &[f64; 3], h: f64) -> Result<Vec<f64>> {
        let (n, dim) = (self.nloc, self.dim);
        let scale = h.powi(dim as i32 - 2);
        let mut k = vec![0.0; n * n];
        for q in 0..self.weights.len() {
            let x = self.physical_point(origin, h, q);
            let rho = coeff.eval(&x, dim);
            if !(rho > 0.0) {
                return Err(Error::NonPositiveCoefficient {
                    point: x[..dim].to_vec(),
                    value: rho,
                });
            }
            let w = self.weights[q] * rho * scale;
            let g = &self.grads[q * n * dim..(q + 1) * n * dim];
            for a in 0..n {
                let ga = &g[a * dim..(a + 1) * dim];
                for b in 0..n {
                    let gb = &g[b * dim..(b + 1) * dim];
                    let dot: f64 = ga.iter().zip(gb).map(|(u, v)| u * v).sum();
                    k[a * n + b] += w * dot;
                }
            }
        }
        Ok(k)
    }

    fn load(&self, coeff: &Coefficient, origin: &[f64; 3], h: f64) -> Vec<f64> {
        let n = self.nloc;
        let scale = h.powi(self.dim as i32);
        let mut f = vec![0.0; n];
        for q in 0..self.weights.len() {
            let x = self.physical_point(origin, h, q);
            let w = self.weights[q] * source_term(coeff, &x, self.dim) * scale;
            for a in 0..n {
                f[a] += w * self.values[q * n + a];
            }
        }
        f
    }
}

/// Assembled linear system with Dirichlet rows imposed.
#[derive(Debug, Clone)]
pub struct DiscreteProblem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub boundary_dofs: Vec<usize>,
    pub mesh: StructuredMesh,
    pub coefficient: Coefficient,
}

impl DiscreteProblem {
    /// Every cell's DoF set, in cell order. Used as a structural oracle.
    pub fn cell_dof_sets(&self) -> Vec<Vec<usize>> {
        (0..self.mesh.num_cells()).map(|c| self.mesh.cell_dofs(c)).collect()
    }
}

/// Column range of the row pattern along one axis for node index `i`.
fn axis_coupling(i: usize, cells: usize, p: usize) -> (usize, usize) {
    let lo_cell = if i % p == 0 { (i / p).saturating_sub(1) } else { i / p };
    let hi_cell = (i / p).min(cells - 1);
    (lo_cell * p, (hi_cell + 1) * p)
}

fn build_pattern(mesh: &StructuredMesh, boundary: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let n = mesh.num_dofs();
    let base = mesh.nodes_per_axis();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    for (row, &is_bc) in boundary.iter().enumerate() {
        if is_bc {
            col_idx.push(row);
        } else {
            let idx = mesh.dof_index(row);
            let mut ranges = [(0, 0); 3];
            for d in 0..mesh.dim {
                ranges[d] = axis_coupling(idx[d], mesh.cells, mesh.degree);
            }
            let (z0, z1) = if mesh.dim == 3 { ranges[2] } else { (0, 0) };
            for z in z0..=z1 {
                for y in ranges[1].0..=ranges[1].1 {
                    for x in ranges[0].0..=ranges[0].1 {
                        col_idx.push(mesh.join([x, y, z], base));
                    }
                }
            }
        }
        row_ptr.push(col_idx.len());
    }
    (row_ptr, col_idx)
}

/// Assembles the stiffness matrix and load vector with `(p+1)^d` Gauss points
/// per cell and imposes homogeneous Dirichlet conditions by row replacement.
pub fn assemble(mesh: &StructuredMesh, coeff: &Coefficient) -> Result<DiscreteProblem> {
    assemble_with_quadrature(mesh, coeff, mesh.degree + 1)
}

pub fn assemble_with_quadrature(
    mesh: &StructuredMesh,
    coeff: &Coefficient,
    qpts_per_axis: usize,
) -> Result<DiscreteProblem> {
    let mesh = StructuredMesh::new(mesh.dim, mesh.cells, mesh.degree)?;
    coeff.validate(mesh.dim)?;
    let n = mesh.num_dofs();
    let boundary: Vec<bool> = (0..n).map(|i| mesh.is_boundary(i)).collect();
    let (row_ptr, col_idx) = build_pattern(&mesh, &boundary);
    let mut values = vec![0.0; col_idx.len()];
    let mut rhs = vec![0.0; n];

    let reference = ReferenceElement::new(mesh.dim, mesh.degree, qpts_per_axis);
    let h = mesh.h();
    let nloc = reference.nloc;
    let num_cells = mesh.num_cells();
    for start in (0..num_cells).step_by(CELL_CHUNK) {
        let end = (start + CELL_CHUNK).min(num_cells);
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = (start..end)
            .into_par_iter()
            .map(|cell| {
                let origin = mesh.cell_origin(cell);
                let k = reference.stiffness(coeff, &origin, h)?;
                Ok((k, reference.load(coeff, &origin, h)))
            })
            .collect::<Result<_>>()?;
        for (cell, (k, f)) in (start..end).zip(blocks) {
            let dofs = mesh.cell_dofs(cell);
            for (a, &row) in dofs.iter().enumerate() {
                if boundary[row] {
                    continue;
                }
                rhs[row] += f[a];
                let (s, e) = (row_ptr[row], row_ptr[row + 1]);
                let cols = &col_idx[s..e];
                let mut pos = 0;
                // dofs ascend, so the search window only moves forward
                for (b, &col) in dofs.iter().enumerate() {
                    pos += cols[pos..].binary_search(&col).expect("pattern covers cell");
                    values[s + pos] += k[a * nloc + b];
                }
            }
        }
    }
    for (row, &is_bc) in boundary.iter().enumerate() {
        if is_bc {
            values[row_ptr[row]] = 1.0;
            rhs[row] = 0.0;
        }
    }
    let matrix = SparseMatrix::from_csr(n, n, row_ptr, col_idx, values)?;
    Ok(DiscreteProblem {
        matrix,
        rhs,
        boundary_dofs: mesh.boundary_dofs(),
        mesh,
        coefficient: coeff.clone(),
    })
}

/// Load vector `(f, phi_i)` with Dirichlet entries zeroed.
pub fn manufactured_rhs(mesh: &StructuredMesh, coeff: &Coefficient) -> Result<Vec<f64>> {
    Ok(assemble(mesh, coeff)?.rhs)
}

/// Manufactured solution sampled at the DoF nodes; zero on the boundary.
pub fn exact_solution(mesh: &StructuredMesh) -> Vec<f64> {
    (0..mesh.num_dofs())
        .map(|i| {
            if mesh.is_boundary(i) {
                0.0
            } else {
                exact_u(&mesh.dof_coords(i), mesh.dim)
            }
        })
        .collect()
}

/// `L2` norm of `u_h - u` with `(p+3)^d` Gauss points per cell.
pub fn l2_error(mesh: &StructuredMesh, discrete: &[f64]) -> Result<f64> {
    if discrete.len() != mesh.num_dofs() {
        return Err(Error::DimensionMismatch {
            expected: mesh.num_dofs(),
            found: discrete.len(),
        });
    }
    let reference = ReferenceElement::new(mesh.dim, mesh.degree, mesh.degree + 3);
    let h = mesh.h();
    let scale = h.powi(mesh.dim as i32);
    let nloc = reference.nloc;
    let total: f64 = (0..mesh.num_cells())
        .into_par_iter()
        .map(|cell| {
            let origin = mesh.cell_origin(cell);
            let dofs = mesh.cell_dofs(cell);
            let mut s = 0.0;
            for q in 0..reference.weights.len() {
                let uh: f64 = (0..nloc)
                    .map(|a| discrete[dofs[a]] * reference.values[q * nloc + a])
                    .sum();
                let x = reference.physical_point(&origin, h, q);
                let e = uh - exact_u(&x, mesh.dim);
                s += reference.weights[q] * scale * e * e;
            }
            s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total.sqrt())
}

/// Coarse space for the additive two-level preconditioner.
#[derive(Debug, Clone)]
pub struct CoarseSpace {
    /// Interpolation from coarse vertices to fine DoFs (`n_fine x n_coarse`).
    pub p0: SparseMatrix,
    /// Galerkin operator `P0ᵀ A P0`.
    pub coarse_matrix: SparseMatrix,
}

/// Multilinear interpolation from the vertices of the mesh cells to every
/// high-order DoF location.
pub fn interpolation(mesh: &StructuredMesh) -> Result<SparseMatrix> {
    let p = mesh.degree;
    let coarse_base = mesh.cells + 1;
    let n = mesh.num_dofs();
    let mut triplets = Vec::new();
    for dof in 0..n {
        let idx = mesh.dof_index(dof);
        let mut axis: [Vec<(usize, f64)>; 3] = Default::default();
        for d in 0..3 {
            axis[d] = if d >= mesh.dim {
                vec![(0, 1.0)]
            } else {
                let (v, r) = (idx[d] / p, idx[d] % p);
                if r == 0 {
                    vec![(v, 1.0)]
                } else {
                    let t = r as f64 / p as f64;
                    vec![(v, 1.0 - t), (v + 1, t)]
                }
            };
        }
        for &(vz, wz) in &axis[2] {
            for &(vy, wy) in &axis[1] {
                for &(vx, wx) in &axis[0] {
                    let col = mesh.join([vx, vy, vz], coarse_base);
                    triplets.push((dof, col, wx * wy * wz));
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, coarse_base.pow(mesh.dim as u32), &triplets)
}

pub fn build_coarse_and_transfer(mesh: &StructuredMesh, a: &SparseMatrix) -> Result<CoarseSpace> {
    let p0 = interpolation(mesh)?;
    if a.nrows() != p0.nrows() {
        return Err(Error::DimensionMismatch {
            expected: p0.nrows(),
            found: a.nrows(),
        });
    }
    let coarse_matrix = p0.transpose().matmul(&a.matmul(&p0)?)?;
    Ok(CoarseSpace { p0, coarse_matrix })
}
