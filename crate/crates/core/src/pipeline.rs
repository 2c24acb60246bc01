//! Task orchestration: run a configured task, write reports and grids.
//!
//! Exit codes: 0 on verified success, 1 on a negative verdict (not
//! monochromatic, verification failed, invalid norm), 2 on operational
//! errors (the caller maps `Err` to 2).

use crate::blmetric::{bl_frame_field, FrameField};
use crate::config::{RunConfig, Task};
use crate::connection::{
    christoffels, curvature, random_curves, solve_frame_field, verify_preservation,
    ConnectionGrid, IsomorphismField, TransportSampler,
};
use crate::error::{Error, Result};
use crate::fields::validate_field;
use crate::isometry::{monochromacy_check, SourceNormData};
use crate::report;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

pub struct RunOutcome {
    pub exit_code: i32,
    pub report_path: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    task: &'a str,
    verdict: &'a str,
    params: &'a serde_json::Value,
    result: T,
}

fn emit<T: Serialize>(
    out_dir: &Path,
    task: Task,
    pass: bool,
    params: &serde_json::Value,
    result: T,
    mut artifacts: Vec<PathBuf>,
) -> Result<RunOutcome> {
    let report = Report {
        task: task.name(),
        verdict: if pass { "pass" } else { "fail" },
        params,
        result,
    };
    let report_path = report::write_json(out_dir, "report.json", &report)?;
    artifacts.insert(0, report_path.clone());
    Ok(RunOutcome {
        exit_code: if pass { 0 } else { 1 },
        report_path,
        artifacts,
    })
}

/// Shared synthesis pass: frames, anchor system at the basepoint, the
/// isomorphism field, and its Christoffels.
pub fn synthesize(
    config: &RunConfig,
) -> Result<(SourceNormData, FrameField, IsomorphismField, ConnectionGrid)> {
    let iso_params = config.isometry_params();
    let p_node = config.grid.nearest_node(&config.basepoint);
    let p = config.grid.point(p_node);
    let norm_p = config
        .field
        .norm_at(&p)
        .map_err(|e| e.in_stage("basepoint norm"))?;
    let src = SourceNormData::prepare(&norm_p, &iso_params)
        .map_err(|e| e.in_stage("basepoint anchor system"))?;
    let frames = bl_frame_field(&config.field, &config.grid, &config.quad)
        .map_err(|e| e.in_stage("Binet-Legendre frame field"))?;
    let iso = solve_frame_field(
        &config.field,
        &config.grid,
        &src,
        &frames,
        &config.basepoint,
        &config.solve_params(),
    )
    .map_err(|e| e.in_stage("frame-field continuation"))?;
    let conn = christoffels(&iso).map_err(|e| e.in_stage("christoffels"))?;
    Ok((src, frames, iso, conn))
}

#[derive(Serialize)]
struct SynthesisSummary {
    grid_nodes: usize,
    max_defect: f64,
    max_relative_defect: f64,
    max_anchor_residual: f64,
    gamma_max_abs: f64,
}

fn synthesis_summary(iso: &IsomorphismField, conn: &ConnectionGrid) -> SynthesisSummary {
    SynthesisSummary {
        grid_nodes: iso.grid.len(),
        max_defect: iso.max_defect(),
        max_relative_defect: iso.max_defect() / iso.defect_scale,
        max_anchor_residual: iso.max_anchor_residual(),
        gamma_max_abs: conn.max_abs(),
    }
}

/// Execute `task` and write `report.json` (plus CSV grids where applicable)
/// into `out_dir`.
pub fn run(config: &RunConfig, task: Task, out_dir: &Path) -> Result<RunOutcome> {
    match task {
        Task::Validate => {
            let report = validate_field(
                &config.field,
                &config.grid,
                config.validate.samples_per_node,
                config.quad.seed,
                config.validate.tolerance,
                config.validate.lipschitz_budget,
            )
            .map_err(|e| e.in_stage("field validation"))?;
            let pass = report.valid;
            emit(out_dir, task, pass, &config.echo, report, vec![])
        }
        Task::Bl => {
            let frames = bl_frame_field(&config.field, &config.grid, &config.quad)
                .map_err(|e| e.in_stage("Binet-Legendre frame field"))?;
            let artifacts = report::export_frames_csv(out_dir, &config.grid, &frames)?;
            let worst_residual = frames
                .metrics
                .iter()
                .zip(&frames.frames)
                .map(|(g, e)| {
                    ((e.transpose() * g * e)
                        - nalgebra::DMatrix::identity(g.nrows(), g.nrows()))
                    .abs()
                    .max()
                })
                .fold(0.0, f64::max);
            let result = json!({
                "grid_nodes": config.grid.len(),
                "worst_frame_residual": worst_residual,
            });
            emit(out_dir, task, true, &config.echo, result, artifacts)
        }
        Task::IsoDim => {
            let p = config.grid.point(config.grid.nearest_node(&config.basepoint));
            let norm_p = config.field.norm_at(&p)?;
            let src = SourceNormData::prepare(&norm_p, &config.isometry_params())?;
            let n = config.grid.dim();
            let result = json!({
                "basepoint": p,
                "dimension": n,
                "so_dim": crate::isometry::so_dim(n),
                "isotropy_dim": src.isotropy.basis.len(),
                "anchor_count": src.isotropy.m,
                "smallest_kept_sv": src.isotropy.smallest_kept_sv,
                "largest_dropped_sv": src.isotropy.largest_dropped_sv,
                "anchor_jacobian_smallest_sv": src.anchors.smallest_sv,
            });
            emit(out_dir, task, true, &config.echo, result, vec![])
        }
        Task::Monochromacy => {
            let report = monochromacy_check(
                &config.field,
                &config.grid,
                &config.basepoint,
                &config.isometry_params(),
            )
            .map_err(|e| e.in_stage("monochromacy check"))?;
            let pass = report.monochromatic;
            emit(out_dir, task, pass, &config.echo, report, vec![])
        }
        Task::Synthesize => {
            let (_, frames, iso, conn) = synthesize(config)?;
            let mut artifacts = report::export_gamma_csv(out_dir, &conn)?;
            artifacts.extend(report::export_frames_csv(out_dir, &config.grid, &frames)?);
            let result = synthesis_summary(&iso, &conn);
            emit(out_dir, task, true, &config.echo, result, artifacts)
        }
        Task::Transport => {
            let (curve, v0) = config.curve.as_ref().ok_or_else(|| Error::Config {
                path: "curve".into(),
                message: "the transport task requires a `curve` section".into(),
            })?;
            let (_, _, iso, conn) = synthesize(config)?;
            let sampler = TransportSampler::new(&conn, &config.transport);
            let v0v = nalgebra::DVector::from_row_slice(v0);
            let v1 = sampler
                .transport(curve, &v0v, config.transport.steps)
                .map_err(|e| e.in_stage("parallel transport"))?;
            let start = curve.point(0.0)?;
            let end = curve.point(1.0)?;
            let f0 = config.field.norm_at(&start)?.eval(v0v.as_slice());
            let f1 = config.field.norm_at(&end)?.eval(v1.as_slice());
            let result = json!({
                "synthesis": synthesis_summary(&iso, &conn),
                "start": start,
                "end": end,
                "v0": v0,
                "v1": v1.as_slice(),
                "f_start": f0,
                "f_end": f1,
                "relative_error": (f1 - f0).abs() / f0,
            });
            emit(out_dir, task, true, &config.echo, result, vec![])
        }
        Task::Verify => {
            let (_, _, iso, conn) = synthesize(config)?;
            let curves = random_curves(
                &config.grid.chart,
                config.verify.curves,
                crate::rng::derive_seed(config.quad.seed, "verify-curves"),
            );
            let report = verify_preservation(
                &config.field,
                &conn,
                &curves,
                config.verify.vectors_per_curve,
                config.verify.tolerance,
                &config.transport,
                crate::rng::derive_seed(config.quad.seed, "verify-vectors"),
            )
            .map_err(|e| e.in_stage("preservation verification"))?;
            let pass = report.pass;
            let result = json!({
                "synthesis": synthesis_summary(&iso, &conn),
                "verification": report,
            });
            emit(out_dir, task, pass, &config.echo, result, vec![])
        }
        Task::Curvature => {
            let (_, _, iso, conn) = synthesize(config)?;
            let curv = curvature(&conn).map_err(|e| e.in_stage("curvature"))?;
            let artifacts = report::export_curvature_csv(out_dir, &curv)?;
            let result = json!({
                "synthesis": synthesis_summary(&iso, &conn),
                "curvature_max_abs": curv.max_abs(),
            });
            emit(out_dir, task, true, &config.echo, result, artifacts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn validate_task_runs_end_to_end() {
        let dir = std::env::temp_dir().join(format!("berwald-test-{}", std::process::id()));
        let cfg = parse_config(
            r#"{
                "chart": {"type": "torus", "periods": [1.0, 1.0], "resolution": [4, 4]},
                "metric": {"family": "randers", "q": [[1, 0], [0, 1]], "b": [0.3, 0]},
                "validate": {"samples_per_node": 50}
            }"#,
        )
        .unwrap();
        let outcome = run(&cfg, Task::Validate, &dir).unwrap();
        assert_eq!(outcome.exit_code, 0);
        let text = std::fs::read_to_string(&outcome.report_path).unwrap();
        assert!(text.contains("\"verdict\": \"pass\""));
        std::fs::remove_dir_all(&dir).ok();
    }
}
