use std::process::Command;

use patchdb::compress::Flavor;
use patchdb::experiment::{analyze_matrix, write_curve_csv, ExperimentConfig, MethodSpec, CURVE_HEADER};
use patchdb::fem::{assemble, Coefficient, StructuredMesh};
use patchdb::sparse::{read_matrix_market, write_matrix_market};
use patchdb::{Error, SparseMatrix};

fn patchdb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchdb"))
}

#[test]
fn analyze_from_file_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mtx");
    let mesh = StructuredMesh::square(8, 2).unwrap();
    let a = assemble(&mesh, &Coefficient::Smooth).unwrap().matrix;
    write_matrix_market(&a, &path).unwrap();
    let back = read_matrix_market(&path).unwrap();
    assert_eq!(back, a);

    let grid = [1e-6, 1e-3, 1e-1, 1.0, 10.0];
    let mem = analyze_matrix(&a, 9, &grid, Flavor::EntrywiseL1).unwrap();
    let file = analyze_matrix(&back, 9, &grid, Flavor::EntrywiseL1).unwrap();
    assert_eq!(mem, file);
    assert_eq!(mem.histogram.iter().sum::<usize>(), 64);
}

#[test]
fn identical_blocks_compress_fully() {
    // eight copies of the same 3x3 block on the diagonal
    let mut t = Vec::new();
    for b in 0..8 {
        for i in 0..3 {
            for j in 0..3 {
                t.push((3 * b + i, 3 * b + j, if i == j { 4.0 } else { -1.0 }));
            }
        }
    }
    let a = SparseMatrix::from_triplets(24, 24, &t).unwrap();
    for eps in [1e-12, 1.0, 1e3] {
        let r = analyze_matrix(&a, 3, &[eps], Flavor::EntrywiseL1).unwrap();
        assert_eq!(r.curve[0].db_size, 1);
        assert_eq!(r.curve[0].ratio, 7.0 / 8.0);
    }
}

#[test]
fn analyze_reports_missing_patches() {
    let a = SparseMatrix::identity(10);
    let err = analyze_matrix(&a, 4, &[1.0], Flavor::EntrywiseL1).unwrap_err();
    assert!(matches!(err, Error::NoPatchesFound { patch_size: 4 }), "{err}");
}

#[test]
fn tiny_experiments_converge() {
    for base in [ExperimentConfig::experiment1(), ExperimentConfig::experiment2()] {
        let cfg = ExperimentConfig {
            cells: 4,
            degrees: vec![2, 3],
            methods: vec![MethodSpec::Greedy, MethodSpec::GreedyL1, MethodSpec::KmeansSpectral, MethodSpec::Bootstrap],
            db_sizes: vec![10],
            ..base
        };
        let rows = patchdb::experiment::run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 5);
        for r in &rows {
            assert_eq!(r.status, "ok", "{r:?}");
            // entrywise matching ignores boundary rows, so at this size it can
            // hand a boundary patch an interior factor
            if r.method != "greedy-l1" {
                assert_eq!(r.converged, Some(true), "{r:?}");
            }
        }
    }
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mtx = dir.path().join("m.mtx");
    let st = patchdb()
        .args(["export-matrix", "--cells", "6", "--degree", "2", "--out"])
        .arg(&mtx)
        .status()
        .unwrap();
    assert!(st.success());

    let curve = dir.path().join("curve.csv");
    let st = patchdb()
        .arg("analyze")
        .arg(&mtx)
        .args(["--patch-size", "9", "--eps-grid", "1e-6,1e-2,1,100", "--out"])
        .arg(&curve)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&curve).unwrap();
    assert!(text.starts_with(CURVE_HEADER));
    assert_eq!(text.lines().count(), 5);
    assert!(dir.path().join("curve.histogram.csv").exists());

    let a = read_matrix_market(&mtx).unwrap();
    let r = analyze_matrix(&a, 9, &[1e-6, 1e-2, 1.0, 100.0], Flavor::EntrywiseL1).unwrap();
    let mut expect = Vec::new();
    write_curve_csv(&r.curve, &mut expect).unwrap();
    assert_eq!(text.as_bytes(), expect.as_slice());
}

#[test]
fn cli_experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let st = patchdb()
            .args(["--threads", threads, "experiment2", "--cells", "4", "--degree", "2"])
            .args(["--method", "greedy,kmeans-entrywise", "--db-size", "12", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        assert!(dir.path().join(format!("{name}.config.json")).exists());
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "3");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("p,method,target_db_size,actual_db_size,iterations,converged,final_relres"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn cli_rejects_bad_input() {
    let out = patchdb()
        .args(["experiment1", "--cells", "4", "--degree", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("degree"));
}

#[test]
fn cli_benchmark_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let st = patchdb()
        .args(["benchmark", "--cells", "6", "--degree", "2", "--applies", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("mode,n_p,m_p,p_s,setup_s,apply_s,bytes"));
    assert!(lines[1].starts_with("exact,36,36,9,"));
    assert!(lines[2].starts_with("compressed,36,9,9,"));
}
