use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_penalty-spde"));
    c.env_remove("PENALTY_SPDE_THREADS");
    c
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_NOISY: &str = r#"{
  "schema_version": 1,
  "mesh": { "kind": "rect", "nx": 3, "ny": 3 },
  "physics": { "nu": 1.0, "t_final": 0.02 },
  "scheme": { "kind": "stokes-penalty", "eps": { "value": 0.01 }, "k": { "value": 0.005 } },
  "noise": { "j": 3 },
  "ensemble": { "samples": 6 }
}"#;

#[test]
fn zero_config_writes_zero_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", example("zero.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "m");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        for (name, v) in header.iter().zip(r) {
            if !matches!(*name, "m" | "t" | "k_over_eps") {
                assert_eq!(*v, 0.0, "{name}");
            }
        }
    }
}

#[test]
fn bundled_l_shape_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        example("paper_l_shape.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let k = 0.16f64.powf(2.1).powf(1.1);
    let m = (1.0 / k).round() as usize;
    assert_eq!(m, 69);
    let csv = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    assert_eq!(csv.lines().count(), m + 1);
    assert!(stdout(&o).contains(&format!("{m} steps")));
    for s in [0, 23, 46, 69] {
        assert!(dir.path().join(format!("snapshot_{s:05}.vtk")).exists());
    }
}

#[test]
fn eps_above_one_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "schema_version": 1, "mesh": { "kind": "rect", "nx": 2, "ny": 2 },
             "physics": { "nu": 1.0, "t_final": 1.0 },
             "scheme": { "kind": "penalty-linear", "eps": { "value": 2.0 }, "k": { "value": 0.1 } } }"#,
    );
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ε ≤ 1"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_NOISY.replace("\"nu\"", "\"mu\": 1.0, \"nu\""));
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mu"), "{}", stderr(&o));
}

#[test]
fn increasing_eps_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_NOISY);
    let o = run(&["sweep", cfg.to_str().unwrap(), "--eps-list", "0.001,0.01"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("eps list must be strictly decreasing"), "{}", stderr(&o));
}

#[test]
fn single_eps_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_NOISY);
    let out = dir.path().join("o");
    let o = run(&["sweep", cfg.to_str().unwrap(), "--eps-list", "0.01", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("slope: not applicable"));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert!(json["slope"].is_null());
    assert_eq!(json["schema_version"], 1);
}

#[test]
fn sweep_output_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_NOISY);
    let mut csvs = Vec::new();
    for t in ["1", "3"] {
        let out = dir.path().join(format!("t{t}"));
        let o = bin()
            .args(["sweep", cfg.to_str().unwrap(), "--eps-list", "0.01,0.001", "--seed", "5"])
            .args(["--out", out.to_str().unwrap()])
            .env("PENALTY_SPDE_THREADS", t)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csvs.push((
            std::fs::read(out.join("sweep.csv")).unwrap(),
            std::fs::read(out.join("sweep.json")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn fig3_preset_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_NOISY);
    let out = dir.path().join("o");
    let o = run(&["sweep", cfg.to_str().unwrap(), "--paper-fig3", "--samples", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let eps: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(eps.len(), 5);
    for w in eps.windows(2) {
        assert!((w[0] / w[1] - 5.0).abs() < 1e-12);
    }
}

#[test]
fn zero_audit_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "audit",
        example("zero.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("audit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn tiny_viscosity_audit_reports_through_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL_NOISY
            .replace("\"nu\": 1.0", "\"nu\": 1e-6")
            .replace("\"samples\": 6", "\"samples\": 2, \"levels\": [0.5, 0.25]"),
    );
    let o = run(&["audit", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    let c = code(&o);
    assert!(c == 0 || c == 4, "exit {c}: {}", stderr(&o));
}

#[test]
fn meshgen_l_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.mesh");
    let o = run(&["meshgen", "--out", p.to_str().unwrap(), "l-shape", "--side", "2", "--n", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("8 vertices, 6 triangles"));
    let mesh = penalty_spde::mesh::Mesh::read_native(&p).unwrap();
    assert_eq!(mesh.n_triangles(), 6);
    let o = run(&["meshgen", "--out", p.to_str().unwrap(), "l-shape", "--n", "3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_config_exits_2() {
    let o = run(&["run", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 2);
}
