//! Report and grid emission: deterministic JSON plus CSV for bulk data.
//!
//! Reports never embed timestamps; wall-clock metadata goes to a separate
//! `run_meta.json` so repeated runs with the same seeds are byte-identical.

use crate::blmetric::FrameField;
use crate::connection::{ConnectionGrid, CurvatureGrid};
use crate::error::Result;
use crate::grid::Grid;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Serialize to canonical pretty JSON (serde_json orders object keys).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v: serde_json::Value = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, to_canonical_json(value)?)?;
    Ok(path)
}

/// Wall-clock sidecar, deliberately kept out of the main report.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub task: String,
    pub duration_seconds: f64,
    pub unix_timestamp: u64,
    pub threads: usize,
}

pub fn write_run_meta(dir: &Path, meta: &RunMeta) -> Result<PathBuf> {
    write_json(dir, "run_meta.json", meta)
}

fn grid_sidecar(grid: &Grid, columns: &[&str]) -> serde_json::Value {
    serde_json::json!({
        "chart": grid.chart,
        "resolution": grid.res,
        "columns": columns,
    })
}

/// Christoffel CSV: one row per (node, i, j, s) with value Gamma^j_{s i};
/// indices are 1-based in the file.
pub fn export_gamma_csv(dir: &Path, conn: &ConnectionGrid) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = conn.dim();
    let mut header = String::new();
    for k in 1..=n {
        write!(header, "x{k},").unwrap();
    }
    header.push_str("i,j,s,gamma\n");
    let mut body = header;
    for node in 0..conn.grid.len() {
        let x = conn.grid.point(node);
        for i in 0..n {
            let g = &conn.gammas[i][node];
            for j in 0..n {
                for s in 0..n {
                    for xi in &x {
                        write!(body, "{xi},").unwrap();
                    }
                    writeln!(body, "{},{},{},{}", i + 1, j + 1, s + 1, g[(j, s)]).unwrap();
                }
            }
        }
    }
    let csv_path = dir.join("gamma.csv");
    fs::write(&csv_path, body)?;
    let sidecar = grid_sidecar(
        &conn.grid,
        &["x1..xn", "i (derivative axis)", "j (row)", "s (column)", "gamma"],
    );
    let sidecar_path = write_json(dir, "gamma_grid.json", &sidecar)?;
    Ok(vec![csv_path, sidecar_path])
}

/// Frame-field CSV: metric and frame entries per node.
pub fn export_frames_csv(dir: &Path, grid: &Grid, frames: &FrameField) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = grid.dim();
    let mut body = String::new();
    for k in 1..=n {
        write!(body, "x{k},").unwrap();
    }
    body.push_str("i,j,g,e\n");
    for node in 0..grid.len() {
        let x = grid.point(node);
        for i in 0..n {
            for j in 0..n {
                for xi in &x {
                    write!(body, "{xi},").unwrap();
                }
                writeln!(
                    body,
                    "{},{},{},{}",
                    i + 1,
                    j + 1,
                    frames.metrics[node][(i, j)],
                    frames.frames[node][(i, j)]
                )
                .unwrap();
            }
        }
    }
    let csv_path = dir.join("frames.csv");
    fs::write(&csv_path, body)?;
    let sidecar = grid_sidecar(grid, &["x1..xn", "i", "j", "g (metric)", "e (frame)"]);
    let sidecar_path = write_json(dir, "frames_grid.json", &sidecar)?;
    Ok(vec![csv_path, sidecar_path])
}

/// Curvature CSV: one row per (node, pair, j, s).
pub fn export_curvature_csv(dir: &Path, curv: &CurvatureGrid) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = curv.grid.dim();
    let mut body = String::new();
    for k in 1..=n {
        write!(body, "x{k},").unwrap();
    }
    body.push_str("i,l,j,s,r\n");
    for node in 0..curv.grid.len() {
        let x = curv.grid.point(node);
        for (p, (i, l)) in curv.pairs.iter().enumerate() {
            let m = &curv.values[p][node];
            for j in 0..n {
                for s in 0..n {
                    for xi in &x {
                        write!(body, "{xi},").unwrap();
                    }
                    writeln!(
                        body,
                        "{},{},{},{},{}",
                        i + 1,
                        l + 1,
                        j + 1,
                        s + 1,
                        m[(j, s)]
                    )
                    .unwrap();
                }
            }
        }
    }
    let csv_path = dir.join("curvature.csv");
    fs::write(&csv_path, body)?;
    let sidecar = grid_sidecar(&curv.grid, &["x1..xn", "i", "l", "j", "s", "r"]);
    let sidecar_path = write_json(dir, "curvature_grid.json", &sidecar)?;
    Ok(vec![csv_path, sidecar_path])
}
