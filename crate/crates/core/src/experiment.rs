//! Drivers behind the command-line tool: the compression experiments, the
//! compressibility analysis of an external matrix, and the storage/timing
//! benchmark. Everything here writes plain CSV.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{
    bootstrap_from, compressibility_curve, greedy_for_size, greedy_tolerance, partitioned_build, ClusterParams,
    CurvePoint, Database, Flavor, Variant, DEFAULT_MAX_ITERS,
};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::fem::{assemble, build_coarse_and_transfer, CoarseSpace, Coefficient, DiscreteProblem, StructuredMesh};
use crate::krylov::{gmres, GmresOptions, Side, SolveReport};
use crate::patch::{detect_patches, extract_all, PatchSet};
use crate::precond::{ComboPreconditioner, PatchPreconditioner, Preconditioner};
use crate::sparse::SparseMatrix;

pub const DEFAULT_SEED: u64 = 42;
/// Bytes per entry of the patch-to-database index.
pub const INDEX_BYTES: u64 = 8;

pub const EXPERIMENT_HEADER: &str = "p,method,target_db_size,actual_db_size,iterations,converged,final_relres,status,config_hash";
pub const CURVE_HEADER: &str = "eps,db_size,ratio";
pub const HISTOGRAM_HEADER: &str = "entry,count";
pub const BENCHMARK_HEADER: &str = "mode,n_p,m_p,p_s,setup_s,apply_s,bytes,config_hash";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    Greedy,
    GreedyL1,
    KmeansEntrywise,
    KmeansSpectral,
    KmeansVarmin,
    Bootstrap,
}

impl MethodSpec {
    pub fn name(self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::GreedyL1 => "greedy-l1",
            Self::KmeansEntrywise => "kmeans-entrywise",
            Self::KmeansSpectral => "kmeans-spectral",
            Self::KmeansVarmin => "kmeans-varmin",
            Self::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub restart: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub omega: f64,
    pub left_pc: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            restart: 20,
            tol: 1e-8,
            max_iters: 1000,
            omega: 1.0,
            left_pc: false,
        }
    }
}

impl SolverConfig {
    pub fn gmres_options(&self) -> GmresOptions {
        GmresOptions {
            restart: self.restart,
            tol: self.tol,
            max_iters: self.max_iters,
            side: if self.left_pc { Side::Left } else { Side::Right },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.restart == 0 || !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument("restart, tol and max_iters must be positive".into()));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidArgument(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub dim: usize,
    pub cells: usize,
    pub degrees: Vec<usize>,
    pub coefficient: Coefficient,
    pub methods: Vec<MethodSpec>,
    /// Requested database sizes; greedy sizes are found by a tolerance search.
    pub db_sizes: Vec<usize>,
    /// Fixed greedy tolerance; replaces the size search when set.
    pub eps: Option<f64>,
    /// Accepted relative deviation from a requested greedy size.
    pub size_slack: f64,
    /// Clustering is skipped below this size.
    pub min_cluster_size: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    /// Run the exact (uncompressed) preconditioner as the first row.
    pub include_full: bool,
    pub solver: SolverConfig,
    /// Directory for per-solve residual histories; not part of the hash.
    #[serde(skip)]
    pub residual_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::experiment1()
    }
}

impl ExperimentConfig {
    /// Smooth coefficient on a 60x60 mesh.
    pub fn experiment1() -> Self {
        Self {
            experiment: "experiment1".into(),
            dim: 2,
            cells: 60,
            degrees: vec![2, 3, 4, 5],
            coefficient: Coefficient::Smooth,
            methods: vec![MethodSpec::Greedy],
            db_sizes: vec![74, 35, 18, 15, 13, 7, 6],
            eps: None,
            size_slack: 0.1,
            min_cluster_size: 10,
            seed: DEFAULT_SEED,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            include_full: true,
            solver: SolverConfig::default(),
            residual_dir: None,
        }
    }

    /// Piecewise-constant coefficient on a 60x60 mesh.
    pub fn experiment2() -> Self {
        Self {
            experiment: "experiment2".into(),
            coefficient: Coefficient::default_piecewise(),
            db_sizes: vec![131, 113, 96, 52, 25, 5, 3],
            ..Self::experiment1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidArgument(format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        if self.cells == 0 {
            return Err(Error::InvalidArgument("cells must be positive".into()));
        }
        if self.degrees.is_empty() {
            return Err(Error::InvalidArgument("no polynomial degrees given".into()));
        }
        if let Some(&p) = self.degrees.iter().find(|&&p| p < 2) {
            // no cell patch is detectable for linear elements
            return Err(Error::InvalidDegree(p));
        }
        self.coefficient.validate(self.dim)?;
        if !self.methods.is_empty() && self.eps.is_none() && self.db_sizes.is_empty() {
            return Err(Error::InvalidArgument("compression methods need db sizes or eps".into()));
        }
        if self.db_sizes.contains(&0) {
            return Err(Error::InvalidArgument("database sizes must be positive".into()));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::InvalidArgument(format!("eps must be positive, got {e}")));
            }
        }
        if !(self.size_slack >= 0.0) {
            return Err(Error::InvalidArgument("size slack must be nonnegative".into()));
        }
        self.solver.validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub p: usize,
    pub method: String,
    pub target_db_size: Option<usize>,
    pub actual_db_size: Option<usize>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub final_relres: Option<f64>,
    pub status: String,
}

impl ExperimentRow {
    fn failed(p: usize, method: &str, target: Option<usize>, status: String) -> Self {
        Self {
            p,
            method: method.into(),
            target_db_size: target,
            actual_db_size: None,
            iterations: None,
            converged: None,
            final_relres: None,
            status,
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

pub fn write_experiment_csv(rows: &[ExperimentRow], hash: &str, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{EXPERIMENT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.p,
            r.method,
            opt(&r.target_db_size),
            opt(&r.actual_db_size),
            opt(&r.iterations),
            opt(&r.converged),
            r.final_relres.map_or_else(String::new, |v| format!("{v:.6e}")),
            r.status,
            hash
        )?;
    }
    Ok(())
}

/// Everything the solves for one degree share.
pub struct Setup {
    pub problem: DiscreteProblem,
    pub patch_set: PatchSet,
    pub patch_matrices: Vec<DenseMatrix>,
    pub coarse: CoarseSpace,
}

impl Setup {
    pub fn new(dim: usize, cells: usize, degree: usize, coefficient: &Coefficient) -> Result<Self> {
        let mesh = StructuredMesh::new(dim, cells, degree)?;
        let problem = assemble(&mesh, coefficient)?;
        let patch_set = detect_patches(&problem.matrix, mesh.dofs_per_cell())?;
        let patch_matrices = extract_all(&problem.matrix, &patch_set)?;
        let coarse = build_coarse_and_transfer(&mesh, &problem.matrix)?;
        Ok(Self {
            problem,
            patch_set,
            patch_matrices,
            coarse,
        })
    }

    pub fn exact_pc(&self) -> Result<PatchPreconditioner> {
        PatchPreconditioner::exact(&self.problem.matrix, self.patch_set.clone())
    }

    pub fn compressed_pc(&self, db: Database) -> Result<PatchPreconditioner> {
        PatchPreconditioner::compressed(self.patch_set.clone(), db)
    }

    /// GMRES on the assembled system with the two-level preconditioner.
    pub fn solve(&self, patch_pc: PatchPreconditioner, solver: &SolverConfig) -> Result<SolveReport> {
        let combo = ComboPreconditioner::new(patch_pc.with_omega(solver.omega), self.coarse.clone())?;
        let (_, report) = gmres(
            &self.problem.matrix,
            &self.problem.rhs,
            Some(&combo as &dyn Preconditioner),
            solver.gmres_options(),
        )?;
        Ok(report)
    }
}

/// Builds the database for one table cell. `None` means the configuration
/// is skipped (clustering below the minimum size).
pub fn build_database(
    patches: &[DenseMatrix],
    method: MethodSpec,
    target: Option<usize>,
    cfg: &ExperimentConfig,
) -> Result<Option<Database>> {
    let greedy = |flavor| match (cfg.eps, target) {
        (Some(eps), _) => greedy_tolerance(patches, eps, flavor),
        (None, Some(t)) => greedy_for_size(patches, t, flavor, cfg.size_slack),
        (None, None) => Err(Error::InvalidArgument("no size or tolerance".into())),
    };
    let cluster = |variant| -> Result<Option<Database>> {
        let Some(t) = target else {
            return Err(Error::InvalidArgument("clustering needs a database size".into()));
        };
        if t < cfg.min_cluster_size {
            return Ok(None);
        }
        let params = ClusterParams {
            variant,
            seed: cfg.seed,
            max_iters: cfg.kmeans_max_iters,
        };
        partitioned_build(patches, t, params).map(Some)
    };
    match method {
        MethodSpec::Greedy => greedy(Flavor::Spectral).map(Some),
        MethodSpec::GreedyL1 => greedy(Flavor::EntrywiseL1).map(Some),
        MethodSpec::KmeansEntrywise => cluster(Variant::Entrywise),
        MethodSpec::KmeansSpectral => cluster(Variant::Spectral),
        MethodSpec::KmeansVarmin => cluster(Variant::VarianceMinimizing),
        MethodSpec::Bootstrap => {
            let initial = greedy(Flavor::Spectral)?;
            bootstrap_from(patches, initial, Variant::VarianceMinimizing, cfg.kmeans_max_iters).map(Some)
        }
    }
}

fn row_from_report(p: usize, method: &str, target: Option<usize>, size: usize, rep: &SolveReport) -> ExperimentRow {
    ExperimentRow {
        p,
        method: method.into(),
        target_db_size: target,
        actual_db_size: Some(size),
        iterations: Some(rep.iterations),
        converged: Some(rep.converged),
        final_relres: Some(rep.final_relative_residual),
        status: "ok".into(),
    }
}

fn dump_history(cfg: &ExperimentConfig, p: usize, label: &str, rep: &SolveReport) -> Result<()> {
    if let Some(dir) = &cfg.residual_dir {
        std::fs::create_dir_all(dir)?;
        rep.write_history_file(dir.join(format!("residuals_p{p}_{label}.csv")))?;
    }
    Ok(())
}

/// One degree's rows, in table order.
pub fn run_degree(cfg: &ExperimentConfig, p: usize) -> Result<Vec<ExperimentRow>> {
    let setup = Setup::new(cfg.dim, cfg.cells, p, &cfg.coefficient)?;
    let n_p = setup.patch_set.len();
    let mut rows = Vec::new();
    if cfg.include_full {
        let rep = setup.solve(setup.exact_pc()?, &cfg.solver)?;
        dump_history(cfg, p, "full", &rep)?;
        rows.push(row_from_report(p, "full", Some(n_p), n_p, &rep));
    }
    let targets: Vec<Option<usize>> = match cfg.eps {
        Some(_) => vec![None],
        None => cfg.db_sizes.iter().map(|&t| Some(t)).collect(),
    };
    for &method in &cfg.methods {
        for &target in &targets {
            let name = method.name();
            let label = format!("{name}_{}", opt(&target));
            let row = match build_database(&setup.patch_matrices, method, target, cfg) {
                Ok(None) => ExperimentRow::failed(p, name, target, "skipped".into()),
                Ok(Some(db)) => {
                    let size = db.len();
                    match setup.compressed_pc(db).and_then(|pc| setup.solve(pc, &cfg.solver)) {
                        Ok(rep) => {
                            dump_history(cfg, p, &label, &rep)?;
                            row_from_report(p, name, target, size, &rep)
                        }
                        Err(e) => ExperimentRow::failed(p, name, target, status_of(&e)),
                    }
                }
                Err(e) => ExperimentRow::failed(p, name, target, status_of(&e)),
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

fn status_of(e: &Error) -> String {
    // keep the CSV single-field
    format!("error: {e}").replace([',', '\n'], ";")
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &p in &cfg.degrees {
        rows.extend(run_degree(cfg, p)?);
    }
    Ok(rows)
}

/// Writes `<out>` and `<out>.config.json`; stdout when `out` is `None`.
pub fn run_experiment_to(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ExperimentRow>> {
    let rows = run_experiment(cfg)?;
    let hash = cfg.hash();
    match out {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_experiment_csv(&rows, &hash, &mut f)?;
            f.flush()?;
            let cfg_path = sidecar(path);
            std::fs::write(cfg_path, serde_json::to_string_pretty(cfg)?)?;
        }
        None => write_experiment_csv(&rows, &hash, &mut std::io::stdout().lock())?,
    }
    Ok(rows)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Geometric tolerance grid from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

pub fn default_eps_grid() -> Vec<f64> {
    geometric_grid(1e-8, 1e2, 21)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub n_p: usize,
    pub curve: Vec<CurvePoint>,
    /// Occupancy of each database entry for the largest tolerance.
    pub histogram: Vec<usize>,
}

pub fn analyze_matrix(a: &SparseMatrix, patch_size: usize, eps_grid: &[f64], flavor: Flavor) -> Result<AnalyzeReport> {
    let ps = detect_patches(a, patch_size)?;
    let mats = extract_all(a, &ps)?;
    let curve = compressibility_curve(&mats, eps_grid, flavor)?;
    let last = *eps_grid
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty tolerance grid".into()))?;
    let histogram = greedy_tolerance(&mats, last, flavor)?.occupancy();
    Ok(AnalyzeReport {
        n_p: ps.len(),
        curve,
        histogram,
    })
}

pub fn write_curve_csv(curve: &[CurvePoint], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for c in curve {
        writeln!(w, "{:.6e},{},{:.12}", c.eps, c.db_size, c.ratio)?;
    }
    Ok(())
}

pub fn write_histogram_csv(hist: &[usize], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (j, c) in hist.iter().enumerate() {
        writeln!(w, "{j},{c}")?;
    }
    Ok(())
}

/// Bytes held by the patch factors: shared entries plus one index per patch
/// when compressed, one dense factor per patch otherwise.
pub fn storage_bytes(n_p: u64, m_p: u64, p_s: u64, compressed: bool) -> u64 {
    if compressed {
        m_p * p_s * p_s * 8 + n_p * INDEX_BYTES
    } else {
        n_p * p_s * p_s * 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub cells: usize,
    pub degree: usize,
    pub coefficient: Coefficient,
    /// ℓ1 greedy tolerance for the compressed database.
    pub eps: f64,
    pub applies: usize,
    pub solver: SolverConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            cells: 60,
            degree: 5,
            coefficient: Coefficient::constant(),
            eps: 1e-7,
            applies: 20,
            solver: SolverConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub mode: String,
    pub n_p: usize,
    pub m_p: usize,
    pub p_s: usize,
    pub setup_s: f64,
    pub apply_s: f64,
    pub bytes: u64,
    /// GMRES iterations with this patch term; reported, not in the CSV.
    pub iterations: usize,
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    cfg.solver.validate()?;
    let setup = Setup::new(cfg.dim, cfg.cells, cfg.degree, &cfg.coefficient)?;
    let n = setup.problem.matrix.n();
    let n_p = setup.patch_set.len();
    let p_s = setup.patch_set.patch_size();
    let r: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();

    let exact = setup.exact_pc()?;
    let start = Instant::now();
    let comp_db = {
        // patch extraction is part of the compressed setup
        let mats = extract_all(&setup.problem.matrix, &setup.patch_set)?;
        greedy_tolerance(&mats, cfg.eps, Flavor::EntrywiseL1)?
    };
    let compressed = setup
        .compressed_pc(comp_db)?
        .with_setup_seconds(start.elapsed().as_secs_f64());

    let mut rows = Vec::new();
    for (mode, pc) in [("exact", exact), ("compressed", compressed)] {
        let start = Instant::now();
        for _ in 0..cfg.applies {
            std::hint::black_box(pc.apply(&r)?);
        }
        let apply_s = start.elapsed().as_secs_f64();
        let m_p = pc.stored_factors();
        let setup_s = pc.setup_seconds();
        let iterations = setup.solve(pc, &cfg.solver)?.iterations;
        rows.push(BenchmarkRow {
            mode: mode.into(),
            n_p,
            m_p,
            p_s,
            setup_s,
            apply_s,
            bytes: storage_bytes(n_p as u64, m_p as u64, p_s as u64, mode == "compressed"),
            iterations,
        });
    }
    Ok(rows)
}

pub fn write_benchmark_csv(rows: &[BenchmarkRow], hash: &str, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{BENCHMARK_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.mode, r.n_p, r.m_p, r.p_s, r.setup_s, r.apply_s, r.bytes, hash
        )?;
    }
    Ok(())
}
