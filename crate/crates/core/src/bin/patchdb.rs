use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchdb::compress::Flavor;
use patchdb::experiment::{
    analyze_matrix, default_eps_grid, run_benchmark, run_experiment_to, write_benchmark_csv, write_curve_csv,
    write_histogram_csv, BenchmarkConfig, ExperimentConfig, MethodSpec,
};
use patchdb::fem::{assemble, Coefficient, StructuredMesh};
use patchdb::sparse::{read_matrix_market, write_matrix_market};
use patchdb::Result;

#[derive(Parser)]
#[command(name = "patchdb", version, about = "Compressed patch preconditioners for high-order FEM")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smooth-coefficient compression study.
    Experiment1(ExperimentArgs),
    /// Piecewise-constant-coefficient compression study.
    Experiment2(ExperimentArgs),
    /// Compressibility curve of a Matrix Market file.
    Analyze(AnalyzeArgs),
    /// Setup/apply timing and storage, exact vs compressed.
    Benchmark(BenchmarkArgs),
    /// Write an assembled problem matrix in Matrix Market format.
    ExportMatrix(ExportArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cells: Option<usize>,
    /// Polynomial degree(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    degree: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<MethodSpec>>,
    /// Requested database size(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    db_size: Option<Vec<usize>>,
    /// Fixed greedy tolerance instead of a size search.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restart: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    left_pc: bool,
    /// Skip the uncompressed reference row.
    #[arg(long)]
    no_full: bool,
    /// Directory for residual history CSVs.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    matrix: PathBuf,
    /// Patch size p_s, i.e. (p+1)^d.
    #[arg(long)]
    patch_size: usize,
    #[arg(long, value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    /// Use the spectral distance instead of entrywise ℓ1.
    #[arg(long)]
    spectral: bool,
    /// Curve CSV (stdout if omitted); the histogram goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    /// Run the 3D problem.
    #[arg(long)]
    three_d: bool,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    applies: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value_t = 60)]
    cells: usize,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Coefficient as JSON, e.g. '{"kind":"smooth"}'.
    #[arg(long)]
    coefficient: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn experiment(base: ExperimentConfig, a: ExperimentArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_json(p)?,
        None => base,
    };
    if let Some(v) = a.cells {
        cfg.cells = v;
    }
    if let Some(v) = a.degree {
        cfg.degrees = v;
    }
    if let Some(v) = a.method {
        cfg.methods = v;
    }
    if let Some(v) = a.db_size {
        cfg.db_sizes = v;
    }
    if a.eps.is_some() {
        cfg.eps = a.eps;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.restart {
        cfg.solver.restart = v;
    }
    if let Some(v) = a.tol {
        cfg.solver.tol = v;
    }
    if let Some(v) = a.omega {
        cfg.solver.omega = v;
    }
    if a.left_pc {
        cfg.solver.left_pc = true;
    }
    if a.no_full {
        cfg.include_full = false;
    }
    cfg.residual_dir = a.residuals;
    cfg.validate()?;
    eprintln!("seed {} config {}", cfg.seed, cfg.hash());
    run_experiment_to(&cfg, a.out.as_deref())?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let m = read_matrix_market(&a.matrix)?;
    let grid = a.eps_grid.unwrap_or_else(default_eps_grid);
    let flavor = if a.spectral { Flavor::Spectral } else { Flavor::EntrywiseL1 };
    let report = analyze_matrix(&m, a.patch_size, &grid, flavor)?;
    eprintln!("{} patches", report.n_p);
    match &a.out {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_curve_csv(&report.curve, &mut f)?;
            f.flush()?;
            let hist = path.with_extension("histogram.csv");
            let mut h = std::io::BufWriter::new(std::fs::File::create(hist)?);
            write_histogram_csv(&report.histogram, &mut h)?;
            h.flush()?;
        }
        None => write_curve_csv(&report.curve, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if a.three_d {
        cfg.dim = 3;
    }
    if let Some(v) = a.cells {
        cfg.cells = v;
    }
    if let Some(v) = a.degree {
        cfg.degree = v;
    }
    if let Some(v) = a.eps {
        cfg.eps = v;
    }
    if let Some(v) = a.applies {
        cfg.applies = v;
    }
    let rows = run_benchmark(&cfg)?;
    for r in &rows {
        eprintln!("{}: {} GMRES iterations", r.mode, r.iterations);
    }
    if let [exact, comp] = rows.as_slice() {
        let verdict = if comp.apply_s <= exact.apply_s { "faster" } else { "slower" };
        eprintln!("compressed apply is {verdict} ({:.4}s vs {:.4}s)", comp.apply_s, exact.apply_s);
    }
    let hash = cfg.hash();
    match &a.out {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_benchmark_csv(&rows, &hash, &mut f)?;
            f.flush()?;
        }
        None => write_benchmark_csv(&rows, &hash, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let coeff: Coefficient = match &a.coefficient {
        Some(s) => serde_json::from_str(s)?,
        None => Coefficient::Smooth,
    };
    let mesh = StructuredMesh::new(a.dim, a.cells, a.degree)?;
    let prob = assemble(&mesh, &coeff)?;
    write_matrix_market(&prob.matrix, &a.out)?;
    eprintln!("{} rows, {} nonzeros, patch size {}", prob.matrix.n(), prob.matrix.nnz(), mesh.dofs_per_cell());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || match cli.command {
        Command::Experiment1(a) => experiment(ExperimentConfig::experiment1(), a),
        Command::Experiment2(a) => experiment(ExperimentConfig::experiment2(), a),
        Command::Analyze(a) => analyze(a),
        Command::Benchmark(a) => benchmark(a),
        Command::ExportMatrix(a) => export(a),
    };
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
