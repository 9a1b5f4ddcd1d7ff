//! File output: atomic writes, legacy VTK snapshots, CSV tables and JSON
//! summaries.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{AuditReport, StepMode, SweepResult};
use crate::error::{Error, Result};
use crate::scheme::EnergyReport;
use crate::space::FEFunction;

/// Writes `bytes` to a temporary sibling file and renames it over `path`,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Legacy ASCII VTK unstructured grid with point data `velocity` (vector)
/// and `pressure` (scalar) on the mesh vertices.
pub fn vtk_string(velocity: &FEFunction, pressure: &FEFunction, title: &str) -> String {
    let mesh = velocity.space().mesh();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.replace('\n', " "));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_vertices());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{:e} {:e} 0", p[0], p[1]);
    }
    let nt = mesh.n_triangles();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "5");
    }
    // vertex dofs come first in every space, so vertex values are read off
    // the coefficient vectors directly
    let nv = mesh.n_vertices();
    let vs = velocity.space();
    let ps = pressure.space();
    let _ = writeln!(s, "POINT_DATA {nv}");
    let _ = writeln!(s, "VECTORS velocity double");
    for i in 0..nv {
        let u = velocity.coeffs()[i];
        let v = if vs.components() > 1 {
            velocity.coeffs()[vs.n_scalar() + i]
        } else {
            0.0
        };
        let _ = writeln!(s, "{u:e} {v:e} 0");
    }
    let _ = writeln!(s, "SCALARS pressure double 1\nLOOKUP_TABLE default");
    for i in 0..nv {
        let _ = writeln!(s, "{:e}", pressure.coeffs()[i.min(ps.n_dofs() - 1)]);
    }
    s
}

pub fn write_vtk(path: &Path, velocity: &FEFunction, pressure: &FEFunction, title: &str) -> Result<()> {
    write_atomic(path, vtk_string(velocity, pressure, title).as_bytes())
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per step, columns named after the [`EnergyReport`] fields.
pub fn ledger_csv(reports: &[EnergyReport]) -> Result<String> {
    if reports.is_empty() {
        return Ok(LEDGER_HEADER.join(",") + "\n");
    }
    csv_string(reports)
}

pub const LEDGER_HEADER: [&str; 19] = [
    "m",
    "t",
    "velocity_sq",
    "velocity_prev_sq",
    "velocity_jump_sq",
    "grad_sq",
    "eps_pressure_sq",
    "eps_pressure_prev_sq",
    "eps_pressure_jump_sq",
    "convection_work",
    "forcing_work",
    "noise_work",
    "lhs",
    "rhs",
    "residual",
    "pressure_residual",
    "pressure_mean",
    "divergence",
    "k_over_eps",
];

#[derive(Serialize)]
struct SweepCsvRow {
    eps: f64,
    mean_sq_error: f64,
    rms_error: f64,
    error_variance: f64,
    ci_halfwidth: f64,
    max_ms_error: f64,
    k: f64,
    steps: usize,
    k_over_eps: f64,
    c_tilde: f64,
    n_ok: usize,
    failures: usize,
}

pub const SWEEP_HEADER: [&str; 12] = [
    "eps",
    "mean_sq_error",
    "rms_error",
    "error_variance",
    "ci_halfwidth",
    "max_ms_error",
    "k",
    "steps",
    "k_over_eps",
    "c_tilde",
    "n_ok",
    "failures",
];

pub fn sweep_csv(sweep: &SweepResult) -> Result<String> {
    if sweep.rows.is_empty() {
        return Ok(SWEEP_HEADER.join(",") + "\n");
    }
    csv_string(sweep.rows.iter().map(|r| SweepCsvRow {
        eps: r.eps,
        mean_sq_error: r.stats.mean_sq_error,
        rms_error: r.stats.rms_error,
        error_variance: r.stats.error_variance,
        ci_halfwidth: r.stats.ci_halfwidth,
        max_ms_error: r.stats.max_ms_error,
        k: r.k,
        steps: r.steps,
        k_over_eps: r.k_over_eps,
        c_tilde: r.c_tilde,
        n_ok: r.stats.n_ok(),
        failures: r.stats.failures.len(),
    }))
}

/// One row per refinement level.
pub fn audit_csv(report: &AuditReport) -> Result<String> {
    if report.levels.is_empty() {
        return Ok("h,eps,k,steps,bracket,ci_halfwidth,failures\n".to_string());
    }
    csv_string(&report.levels)
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub reference: String,
    pub candidate: String,
    pub mode: StepMode,
    pub h: f64,
    pub n_samples: usize,
    pub base_seed: u64,
    pub eps: Vec<f64>,
    /// Slope of `log mean_sq_error` against `log eps`.
    pub slope: Option<f64>,
    pub c_tilde: f64,
    pub c_tilde_spread: f64,
    pub mean_sq_decreasing: bool,
    pub max_ms_decreasing: bool,
    pub variance_decreasing: bool,
    pub replay_hashes: Vec<String>,
    pub warnings: Vec<String>,
}

impl SweepSummary {
    pub fn new(sweep: &SweepResult, n_samples: usize, base_seed: u64) -> Self {
        SweepSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            reference: sweep.reference.name().to_string(),
            candidate: sweep.candidate.name().to_string(),
            mode: sweep.mode,
            h: sweep.h,
            n_samples,
            base_seed,
            eps: sweep.rows.iter().map(|r| r.eps).collect(),
            slope: sweep.slope,
            c_tilde: sweep.c_tilde,
            c_tilde_spread: sweep.c_tilde_spread,
            mean_sq_decreasing: sweep.mean_sq_decreasing(),
            max_ms_decreasing: sweep.max_ms_decreasing(),
            variance_decreasing: sweep.variance_decreasing(),
            replay_hashes: sweep
                .rows
                .iter()
                .map(|r| format!("{:016x}", r.stats.replay_hash))
                .collect(),
            warnings: sweep.warnings.clone(),
        }
    }
}

pub fn json_string<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::config(format!("json: {e}")))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleStats;
    use crate::ensemble::SweepRow;
    use crate::scheme::SchemeKind;

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"first version, long").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn empty_tables_have_headers() {
        assert!(ledger_csv(&[]).unwrap().starts_with("m,t,velocity_sq"));
    }

    #[test]
    fn sweep_csv_columns() {
        let stats = EnsembleStats {
            n_samples: 2,
            failures: vec![],
            errors: vec![1.0, 2.0],
            mean_sq_error: 2.5,
            rms_error: 2.5f64.sqrt(),
            error_mean: 1.5,
            error_variance: 0.5,
            ms_by_step: vec![2.5],
            max_ms_error: 2.5,
            ci_halfwidth: 0.1,
            replay_hash: 7,
        };
        let sweep = SweepResult {
            reference: SchemeKind::Saddle,
            candidate: SchemeKind::PenaltyLinear,
            mode: StepMode::Fixed { k: 0.1 },
            h: 0.5,
            rows: vec![SweepRow {
                eps: 0.1,
                k: 0.1,
                steps: 10,
                k_over_eps: 1.0,
                c_tilde: 2.5 * 0.5 / 0.1f64.sqrt(),
                stats,
            }],
            slope: None,
            c_tilde: 0.0,
            c_tilde_spread: 1.0,
            warnings: vec![],
        };
        let s = sweep_csv(&sweep).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("0.1,2.5,"));
        let j = json_string(&SweepSummary::new(&sweep, 2, 0)).unwrap();
        let back: SweepSummary = serde_json::from_str(&j).unwrap();
        assert_eq!(back.slope, None);
        assert_eq!(back.schema_version, SUMMARY_SCHEMA_VERSION);
    }
}
