//! Run configuration: strict JSON parsing with path-precise diagnostics.
//!
//! Unknown keys are rejected everywhere (a typo in a numerical experiment
//! must fail loudly, not silently fall back to a default). Scalar metric
//! coefficients accept either numbers or expression strings over the chart
//! coordinates `x1..xn`.

use crate::connection::{Curve, TransportParams};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::fields::{FinslerField, NormModel};
use crate::grid::{Chart, Grid};
use crate::quadrature::QuadParams;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Validate,
    Bl,
    IsoDim,
    Monochromacy,
    Synthesize,
    Transport,
    Verify,
    Curvature,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Validate => "validate",
            Task::Bl => "bl",
            Task::IsoDim => "iso-dim",
            Task::Monochromacy => "monochromacy",
            Task::Synthesize => "synthesize",
            Task::Transport => "transport",
            Task::Verify => "verify",
            Task::Curvature => "curvature",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawScalar {
    Num(f64),
    Expr(String),
}

impl RawScalar {
    fn to_expression(&self, vars: &[&str], path: &str) -> Result<Expression> {
        match self {
            RawScalar::Num(v) => Ok(Expression::constant(*v, vars)),
            RawScalar::Expr(s) => Expression::parse(s, vars).map_err(|e| Error::Config {
                path: path.to_string(),
                message: e.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "type")]
enum RawChart {
    Torus {
        periods: Vec<f64>,
        resolution: Vec<usize>,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: Vec<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "family")]
enum RawMetric {
    Euclidean {
        q: Vec<Vec<RawScalar>>,
    },
    Randers {
        q: Vec<Vec<RawScalar>>,
        b: Vec<RawScalar>,
    },
    TranslatedBall {
        q: Vec<Vec<RawScalar>>,
        v: Vec<RawScalar>,
        #[serde(default)]
        normalize_v_to: Option<f64>,
    },
    Rotation {
        base: Box<RawMetric>,
        theta: RawScalar,
    },
    Pulled {
        base: Box<RawMetric>,
        a: Vec<Vec<RawScalar>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuadrature {
    #[serde(default = "default_directions")]
    directions: usize,
    #[serde(default = "default_radial_nodes")]
    radial_nodes: usize,
    #[serde(default)]
    search_directions: Option<usize>,
    #[serde(default = "default_seed")]
    seed: u64,
}

fn default_directions() -> usize {
    4096
}
fn default_radial_nodes() -> usize {
    16
}
fn default_seed() -> u64 {
    7
}

impl Default for RawQuadrature {
    fn default() -> Self {
        RawQuadrature {
            directions: default_directions(),
            radial_nodes: default_radial_nodes(),
            search_directions: None,
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(default = "default_newton_tol")]
    newton_tol: f64,
    #[serde(default = "default_max_iters")]
    max_iters: usize,
    #[serde(default = "default_accept_tol")]
    accept_tol: f64,
    #[serde(default = "default_restarts")]
    restarts: usize,
}

fn default_newton_tol() -> f64 {
    1e-12
}
fn default_max_iters() -> usize {
    50
}
fn default_accept_tol() -> f64 {
    1e-6
}
fn default_restarts() -> usize {
    16
}

impl Default for RawSolver {
    fn default() -> Self {
        RawSolver {
            newton_tol: default_newton_tol(),
            max_iters: default_max_iters(),
            accept_tol: default_accept_tol(),
            restarts: default_restarts(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransport {
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_fine_resolution")]
    fine_resolution: usize,
}

fn default_steps() -> usize {
    1000
}
fn default_fine_resolution() -> usize {
    256
}

impl Default for RawTransport {
    fn default() -> Self {
        RawTransport {
            steps: default_steps(),
            fine_resolution: default_fine_resolution(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    #[serde(default = "default_curves")]
    curves: usize,
    #[serde(default = "default_vectors")]
    vectors_per_curve: usize,
    #[serde(default = "default_verify_tol")]
    tolerance: f64,
}

fn default_curves() -> usize {
    100
}
fn default_vectors() -> usize {
    10
}
fn default_verify_tol() -> f64 {
    1e-5
}

impl Default for RawVerify {
    fn default() -> Self {
        RawVerify {
            curves: default_curves(),
            vectors_per_curve: default_vectors(),
            tolerance: default_verify_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValidate {
    #[serde(default = "default_samples_per_node")]
    samples_per_node: usize,
    #[serde(default = "default_validate_tol")]
    tolerance: f64,
    #[serde(default = "default_lipschitz")]
    lipschitz_budget: f64,
}

fn default_samples_per_node() -> usize {
    200
}
fn default_validate_tol() -> f64 {
    1e-9
}
fn default_lipschitz() -> f64 {
    100.0
}

impl Default for RawValidate {
    fn default() -> Self {
        RawValidate {
            samples_per_node: default_samples_per_node(),
            tolerance: default_validate_tol(),
            lipschitz_budget: default_lipschitz(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCurve {
    #[serde(default)]
    components: Option<Vec<RawScalar>>,
    #[serde(default)]
    polyline: Option<Vec<Vec<f64>>>,
    vector: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    chart: RawChart,
    metric: RawMetric,
    #[serde(default)]
    basepoint: Option<Vec<f64>>,
    #[serde(default)]
    quadrature: RawQuadrature,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    transport: RawTransport,
    #[serde(default)]
    verify: RawVerify,
    #[serde(default)]
    validate: RawValidate,
    #[serde(default)]
    curve: Option<RawCurve>,
    #[serde(default)]
    task: Option<Task>,
    #[serde(default)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iters: usize,
    pub accept_tol: f64,
    pub restarts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyConfig {
    pub curves: usize,
    pub vectors_per_curve: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateConfig {
    pub samples_per_node: usize,
    pub tolerance: f64,
    pub lipschitz_budget: f64,
}

/// Fully validated run configuration.
#[derive(Debug)]
pub struct RunConfig {
    pub grid: Grid,
    pub field: FinslerField,
    pub basepoint: Vec<f64>,
    pub quad: QuadParams,
    pub search_directions: usize,
    pub solver: SolverConfig,
    pub transport: TransportParams,
    pub verify: VerifyConfig,
    pub validate: ValidateConfig,
    pub curve: Option<(Curve, Vec<f64>)>,
    pub task: Option<Task>,
    pub output: Option<PathBuf>,
    /// normalized echo of the input (serde_json orders keys), embedded in
    /// reports for reproducibility
    pub echo: serde_json::Value,
}

fn expr_matrix(
    raw: &[Vec<RawScalar>],
    vars: &[&str],
    path: &str,
) -> Result<Vec<Vec<Expression>>> {
    let n = raw.len();
    if n == 0 || raw.iter().any(|row| row.len() != n) {
        return Err(Error::Config {
            path: path.to_string(),
            message: format!("expected a square matrix, got {} rows", n),
        });
    }
    raw.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, s)| s.to_expression(vars, &format!("{path}[{i}][{j}]")))
                .collect()
        })
        .collect()
}

fn expr_vector(raw: &[RawScalar], vars: &[&str], path: &str) -> Result<Vec<Expression>> {
    raw.iter()
        .enumerate()
        .map(|(i, s)| s.to_expression(vars, &format!("{path}[{i}]")))
        .collect()
}

fn build_model(raw: &RawMetric, vars: &[&str], path: &str) -> Result<NormModel> {
    Ok(match raw {
        RawMetric::Euclidean { q } => NormModel::Euclidean {
            q: expr_matrix(q, vars, &format!("{path}.q"))?,
        },
        RawMetric::Randers { q, b } => NormModel::Randers {
            q: expr_matrix(q, vars, &format!("{path}.q"))?,
            b: expr_vector(b, vars, &format!("{path}.b"))?,
        },
        RawMetric::TranslatedBall {
            q,
            v,
            normalize_v_to,
        } => NormModel::TranslatedBall {
            q: expr_matrix(q, vars, &format!("{path}.q"))?,
            v: expr_vector(v, vars, &format!("{path}.v"))?,
            normalize_v_to: *normalize_v_to,
        },
        RawMetric::Rotation { base, theta } => NormModel::Rotation {
            base: Box::new(build_model(base, vars, &format!("{path}.base"))?),
            theta: theta.to_expression(vars, &format!("{path}.theta"))?,
        },
        RawMetric::Pulled { base, a } => NormModel::Pulled {
            base: Box::new(build_model(base, vars, &format!("{path}.base"))?),
            a: expr_matrix(a, vars, &format!("{path}.a"))?,
        },
    })
}

/// Parse and validate a JSON run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let echo: serde_json::Value = serde_json::from_str(text)?;

    let (chart, resolution) = match &raw.chart {
        RawChart::Torus {
            periods,
            resolution,
        } => (
            Chart::Torus {
                periods: periods.clone(),
            },
            resolution.clone(),
        ),
        RawChart::Box { lo, hi, resolution } => (
            Chart::Box {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            resolution.clone(),
        ),
    };
    let n = chart.dim();
    if resolution.len() != n {
        return Err(Error::Config {
            path: "chart.resolution".into(),
            message: format!("expected {n} axes, got {}", resolution.len()),
        });
    }
    if let Some(bad) = resolution.iter().position(|r| *r < 4) {
        return Err(Error::Config {
            path: format!("chart.resolution[{bad}]"),
            message: format!("resolution {} is below the minimum of 4", resolution[bad]),
        });
    }
    let grid = Grid::new(chart.clone(), resolution).map_err(|e| Error::Config {
        path: "chart".into(),
        message: e.to_string(),
    })?;

    let var_names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let vars: Vec<&str> = var_names.iter().map(String::as_str).collect();
    let model = build_model(&raw.metric, &vars, "metric")?;
    if model.dim() != n {
        return Err(Error::Config {
            path: "metric".into(),
            message: format!(
                "metric dimension {} does not match chart dimension {n}",
                model.dim()
            ),
        });
    }
    let field = FinslerField::new(chart, model).map_err(|e| Error::Config {
        path: "metric".into(),
        message: e.to_string(),
    })?;

    let basepoint = raw.basepoint.clone().unwrap_or_else(|| vec![0.0; n]);
    if basepoint.len() != n {
        return Err(Error::Config {
            path: "basepoint".into(),
            message: format!("expected {n} coordinates, got {}", basepoint.len()),
        });
    }

    let curve = match &raw.curve {
        None => None,
        Some(rc) => {
            if rc.vector.len() != n {
                return Err(Error::Config {
                    path: "curve.vector".into(),
                    message: format!("expected {n} components, got {}", rc.vector.len()),
                });
            }
            let c = match (&rc.components, &rc.polyline) {
                (Some(components), None) => {
                    if components.len() != n {
                        return Err(Error::Config {
                            path: "curve.components".into(),
                            message: format!("expected {n} components, got {}", components.len()),
                        });
                    }
                    let exprs: Vec<Expression> = components
                        .iter()
                        .enumerate()
                        .map(|(i, s)| s.to_expression(&["t"], &format!("curve.components[{i}]")))
                        .collect::<Result<_>>()?;
                    Curve::from_exprs(exprs)
                }
                (None, Some(points)) => {
                    if points.len() < 2 || points.iter().any(|p| p.len() != n) {
                        return Err(Error::Config {
                            path: "curve.polyline".into(),
                            message: format!(
                                "need at least 2 points with {n} coordinates each"
                            ),
                        });
                    }
                    Curve::Polyline(points.clone())
                }
                _ => {
                    return Err(Error::Config {
                        path: "curve".into(),
                        message: "exactly one of `components` or `polyline` is required".into(),
                    })
                }
            };
            Some((c, rc.vector.clone()))
        }
    };

    let quad = QuadParams::new(
        raw.quadrature.directions,
        raw.quadrature.radial_nodes,
        raw.quadrature.seed,
    );
    let search_directions = raw
        .quadrature
        .search_directions
        .unwrap_or(if n == 2 { 256 } else { 800 });

    Ok(RunConfig {
        grid,
        field,
        basepoint,
        quad,
        search_directions,
        solver: SolverConfig {
            newton_tol: raw.solver.newton_tol,
            max_iters: raw.solver.max_iters,
            accept_tol: raw.solver.accept_tol,
            restarts: raw.solver.restarts,
        },
        transport: TransportParams {
            steps: raw.transport.steps,
            fine_resolution: raw.transport.fine_resolution,
        },
        verify: VerifyConfig {
            curves: raw.verify.curves,
            vectors_per_curve: raw.verify.vectors_per_curve,
            tolerance: raw.verify.tolerance,
        },
        validate: ValidateConfig {
            samples_per_node: raw.validate.samples_per_node,
            tolerance: raw.validate.tolerance,
            lipschitz_budget: raw.validate.lipschitz_budget,
        },
        curve,
        task: raw.task,
        output: raw.output,
        echo,
    })
}

impl RunConfig {
    /// Isometry-search parameters consistent with this configuration.
    pub fn isometry_params(&self) -> crate::isometry::IsometryParams {
        crate::isometry::IsometryParams {
            restarts: self.solver.restarts,
            seed: self.quad.seed,
            accept_tol: self.solver.accept_tol,
            newton_tol: self.solver.newton_tol,
            max_newton_iters: self.solver.max_iters,
            search_directions: self.search_directions,
            quad: self.quad,
            rank_tol: 1e-8,
            isotropy_samples: (crate::isometry::so_dim(self.grid.dim()) * 20).max(64),
            polish_evals: 80,
        }
    }

    pub fn solve_params(&self) -> crate::connection::SolveParams {
        crate::connection::SolveParams {
            newton_tol: self.solver.newton_tol,
            max_iters: self.solver.max_iters,
            accept_tol: self.solver.accept_tol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "chart": {"type": "torus", "periods": [1.0, 1.0], "resolution": [8, 8]},
        "metric": {"family": "euclidean", "q": [[1, 0], [0, 1]]},
        "task": "validate"
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.grid.res, vec![8, 8]);
        assert_eq!(cfg.quad.directions, 4096);
        assert_eq!(cfg.quad.seed, 7);
        assert_eq!(cfg.solver.max_iters, 50);
        assert_eq!(cfg.task, Some(Task::Validate));
        assert_eq!(cfg.basepoint, vec![0.0, 0.0]);
    }

    #[test]
    fn expression_coefficients_parse_and_differentiate() {
        let text = r#"{
            "chart": {"type": "torus", "periods": [1.0, 1.0], "resolution": [8, 8]},
            "metric": {
                "family": "rotation",
                "base": {"family": "randers", "q": [[1, 0], [0, 1]], "b": [0.5, 0]},
                "theta": "0.3*sin(2*pi*x1)"
            }
        }"#;
        let cfg = parse_config(text).unwrap();
        match &cfg.field.model {
            NormModel::Rotation { theta, .. } => {
                let d = theta.derivative(0);
                for &x in &[0.0, 0.2, 0.5] {
                    let expect =
                        0.6 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
                    assert!((d.eval(&[x, 0.0]).unwrap() - expect).abs() < 1e-14);
                }
            }
            other => panic!("wrong family: {other:?}"),
        }
    }

    #[test]
    fn low_resolution_rejected_with_minimum() {
        let text = MINIMAL.replace("[8, 8]", "[2, 8]");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("minimum of 4"), "{msg}");
        assert!(msg.contains("resolution[0]"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = r#"{
            "chart": {"type": "torus", "periods": [1.0, 1.0], "resolution": [8, 8]},
            "metric": {"family": "euclidean", "q": [[1, 0], [0, 1]]},
            "solver": {"newton_tol": 1e-12, "newtons_tol": 1}
        }"#;
        let err = parse_config(text).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert!(path.contains("solver"), "path: {path}");
                assert!(message.contains("newtons_tol"), "message: {message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let text = r#"{
            "chart": {"type": "torus", "periods": [1.0, 1.0, 1.0], "resolution": [8, 8, 8]},
            "metric": {"family": "euclidean", "q": [[1, 0], [0, 1]]}
        }"#;
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn bad_expression_points_at_entry() {
        let text = r#"{
            "chart": {"type": "torus", "periods": [1.0, 1.0], "resolution": [8, 8]},
            "metric": {"family": "randers", "q": [[1, 0], [0, 1]], "b": ["0.5*x9", 0]}
        }"#;
        let err = parse_config(text).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "metric.b[0]"),
            other => panic!("unexpected error {other}"),
        }
    }
}
