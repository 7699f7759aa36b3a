//! Python bindings: assemble a problem, build a database, run the
//! preconditioned solve, and a few standalone kernels.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use patchdb::compress::{compressibility_curve, Database, Flavor};
use patchdb::dense::{lu_factor, spectral_distance as dense_spectral_distance, DenseMatrix};
use patchdb::experiment::{
    build_database, run_experiment as run_rust_experiment, storage_bytes as rust_storage_bytes, write_experiment_csv,
    ExperimentConfig, MethodSpec, Setup, SolverConfig,
};
use patchdb::fem::Coefficient;
use patchdb::krylov::SolveReport as RustReport;

fn to_py(e: patchdb::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `"smooth"`, `"constant"`, `"piecewise"`, or a JSON object.
pub fn parse_coefficient(spec: &str) -> patchdb::Result<Coefficient> {
    match spec {
        "smooth" => Ok(Coefficient::Smooth),
        "constant" => Ok(Coefficient::constant()),
        "piecewise" => Ok(Coefficient::default_piecewise()),
        json => Ok(serde_json::from_str(json)?),
    }
}

pub fn parse_method(name: &str) -> patchdb::Result<MethodSpec> {
    use clap::ValueEnum;
    MethodSpec::from_str(name, true).map_err(|_| patchdb::Error::InvalidArgument(format!("unknown method {name:?}")))
}

fn dense(rows: &[Vec<f64>]) -> PyResult<DenseMatrix> {
    let n = rows.len();
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a square matrix"));
    }
    DenseMatrix::new(n, n, data).map_err(to_py)
}

#[pyclass(name = "SolveReport", frozen)]
pub struct PySolveReport {
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    restarts: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    final_relative_residual: f64,
    #[pyo3(get)]
    residual_history: Vec<f64>,
}

impl From<RustReport> for PySolveReport {
    fn from(r: RustReport) -> Self {
        Self {
            iterations: r.iterations,
            restarts: r.restarts,
            converged: r.converged,
            final_relative_residual: r.final_relative_residual,
            residual_history: r.residual_history,
        }
    }
}

#[pymethods]
impl PySolveReport {
    fn __repr__(&self) -> String {
        format!(
            "SolveReport(iterations={}, converged={}, final_relative_residual={:.3e})",
            self.iterations, self.converged, self.final_relative_residual
        )
    }
}

#[pyclass(name = "Database", frozen)]
pub struct PyDatabase {
    db: Database,
}

#[pymethods]
impl PyDatabase {
    #[getter]
    fn size(&self) -> usize {
        self.db.len()
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.db.num_patches()
    }

    #[getter]
    fn compression_ratio(&self) -> f64 {
        self.db.compression_ratio()
    }

    #[getter]
    fn phi(&self) -> Vec<usize> {
        self.db.phi().to_vec()
    }

    fn occupancy(&self) -> Vec<usize> {
        self.db.occupancy()
    }

    fn index_json(&self) -> String {
        self.db.index_json().to_string()
    }

    fn __len__(&self) -> usize {
        self.db.len()
    }
}

/// Assembled Poisson problem with its detected patches and coarse space.
#[pyclass(name = "Problem", frozen)]
pub struct PyProblem {
    setup: Setup,
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (cells, degree, coefficient = "smooth", dim = 2))]
    fn new(cells: usize, degree: usize, coefficient: &str, dim: usize) -> PyResult<Self> {
        let coeff = parse_coefficient(coefficient).map_err(to_py)?;
        let setup = Setup::new(dim, cells, degree, &coeff).map_err(to_py)?;
        Ok(Self { setup })
    }

    #[getter]
    fn n(&self) -> usize {
        self.setup.problem.matrix.n()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.setup.problem.matrix.nnz()
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.setup.patch_set.len()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.setup.patch_set.patch_size()
    }

    fn patches(&self) -> Vec<Vec<usize>> {
        self.setup.patch_set.patches().to_vec()
    }

    fn rhs(&self) -> Vec<f64> {
        self.setup.problem.rhs.clone()
    }

    /// `(rows, cols, values)` suitable for `scipy.sparse.coo_matrix`.
    fn triplets(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let a = &self.setup.problem.matrix;
        let mut rows = Vec::with_capacity(a.nnz());
        for i in 0..a.n() {
            rows.extend(std::iter::repeat_n(i, a.row_nnz(i)));
        }
        (rows, a.col_idx().to_vec(), a.values().to_vec())
    }

    fn patch_matrix(&self, k: usize) -> PyResult<Vec<Vec<f64>>> {
        let m = self
            .setup
            .patch_matrices
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("patch {k} out of range")))?;
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }

    /// Method names as on the command line, e.g. `"greedy"` or `"kmeans-spectral"`.
    #[pyo3(signature = (method, db_size = None, eps = None, seed = 42))]
    fn build_database(
        &self,
        py: Python<'_>,
        method: &str,
        db_size: Option<usize>,
        eps: Option<f64>,
        seed: u64,
    ) -> PyResult<PyDatabase> {
        let method = parse_method(method).map_err(to_py)?;
        let cfg = ExperimentConfig {
            eps,
            seed,
            ..ExperimentConfig::experiment1()
        };
        let mats = &self.setup.patch_matrices;
        let db = py
            .detach(|| build_database(mats, method, db_size, &cfg))
            .map_err(to_py)?
            .ok_or_else(|| PyValueError::new_err("database size below the clustering minimum"))?;
        Ok(PyDatabase { db })
    }

    /// GMRES with the two-level preconditioner; exact patch factors when no
    /// database is given.
    #[pyo3(signature = (database = None, restart = 20, tol = 1e-8, omega = 1.0, left = false))]
    fn solve(
        &self,
        py: Python<'_>,
        database: Option<&PyDatabase>,
        restart: usize,
        tol: f64,
        omega: f64,
        left: bool,
    ) -> PyResult<PySolveReport> {
        let solver = SolverConfig {
            restart,
            tol,
            omega,
            left_pc: left,
            ..SolverConfig::default()
        };
        let db = database.map(|d| d.db.clone());
        let report = py
            .detach(|| {
                let pc = match db {
                    Some(db) => self.setup.compressed_pc(db)?,
                    None => self.setup.exact_pc()?,
                };
                self.setup.solve(pc, &solver)
            })
            .map_err(to_py)?;
        Ok(report.into())
    }

    /// `[(eps, db_size, ratio), ...]`
    #[pyo3(signature = (eps_grid, spectral = false))]
    fn compressibility_curve(&self, eps_grid: Vec<f64>, spectral: bool) -> PyResult<Vec<(f64, usize, f64)>> {
        let flavor = if spectral { Flavor::Spectral } else { Flavor::EntrywiseL1 };
        let curve = compressibility_curve(&self.setup.patch_matrices, &eps_grid, flavor).map_err(to_py)?;
        Ok(curve.into_iter().map(|c| (c.eps, c.db_size, c.ratio)).collect())
    }
}

/// `‖I − A B⁻¹‖₂` for square nested lists.
#[pyfunction]
fn spectral_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (dense(&a)?, dense(&b)?);
    let bf = lu_factor(&b).map_err(to_py)?;
    dense_spectral_distance(&a, &bf).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (n_p, m_p, p_s, compressed = true))]
fn storage_bytes(n_p: u64, m_p: u64, p_s: u64, compressed: bool) -> u64 {
    rust_storage_bytes(n_p, m_p, p_s, compressed)
}

/// Runs an experiment from a JSON config and returns the CSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let rows = py.detach(|| run_rust_experiment(&cfg)).map_err(to_py)?;
    let mut out = Vec::new();
    write_experiment_csv(&rows, &cfg.hash(), &mut out).map_err(to_py)?;
    Ok(String::from_utf8(out).expect("CSV is ASCII"))
}

#[pymodule]
fn patchdb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyDatabase>()?;
    m.add_class::<PySolveReport>()?;
    m.add_function(wrap_pyfunction!(spectral_distance, m)?)?;
    m.add_function(wrap_pyfunction!(storage_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
