//! Finsler fields on charts and the torus constructions used as ground truth.
//!
//! A field assigns a Minkowski norm to every chart point; coefficients may be
//! scalar expressions of the coordinates. The constructions here realize the
//! closed-manifold existence argument: translate the unit balls of a
//! Riemannian metric by a non-vanishing vector field normalized to length
//! 1/2, or pull a fixed norm back by a pointwise rotation.

use crate::connection::ConnectionGrid;
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::grid::{Chart, Grid};
use crate::norms::{validate_norm, MinkowskiNorm, ValidationReport};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// A vector field given by coordinate expressions, normalized to a target
/// length with respect to a supplied Riemannian metric.
#[derive(Debug, Clone)]
pub struct VectorFieldSpec {
    pub components: Vec<Expression>,
    pub target_length: f64,
}

impl VectorFieldSpec {
    pub fn new(components: Vec<Expression>, target_length: f64) -> Self {
        VectorFieldSpec {
            components,
            target_length,
        }
    }
}

/// Pointwise norm model of a field.
#[derive(Debug, Clone)]
pub enum NormModel {
    /// The same norm at every point.
    Constant(MinkowskiNorm),
    Euclidean {
        q: Vec<Vec<Expression>>,
    },
    Randers {
        q: Vec<Vec<Expression>>,
        b: Vec<Expression>,
    },
    /// Unit ball at x is the V(x)-translation of the Q(x)-unit ball; when
    /// `normalize_v_to` is set, V is rescaled to that Q(x)-length first.
    TranslatedBall {
        q: Vec<Vec<Expression>>,
        v: Vec<Expression>,
        normalize_v_to: Option<f64>,
    },
    /// F(x, xi) = base(x)(R(-theta(x)) xi); two-dimensional only.
    Rotation {
        base: Box<NormModel>,
        theta: Expression,
    },
    /// F(x, xi) = base(x)(A(x)^{-1} xi).
    Pulled {
        base: Box<NormModel>,
        a: Vec<Vec<Expression>>,
    },
}

fn eval_matrix(exprs: &[Vec<Expression>], x: &[f64]) -> Result<DMatrix<f64>> {
    let n = exprs.len();
    let mut m = DMatrix::zeros(n, exprs[0].len());
    for (i, row) in exprs.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            m[(i, j)] = e.eval(x)?;
        }
    }
    Ok(m)
}

fn eval_vector(exprs: &[Expression], x: &[f64]) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(exprs.len());
    for (i, e) in exprs.iter().enumerate() {
        v[i] = e.eval(x)?;
    }
    Ok(v)
}

pub fn rotation_matrix(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
    )
}

impl NormModel {
    pub fn dim(&self) -> usize {
        match self {
            NormModel::Constant(n) => n.dim(),
            NormModel::Euclidean { q } => q.len(),
            NormModel::Randers { q, .. } => q.len(),
            NormModel::TranslatedBall { q, .. } => q.len(),
            NormModel::Rotation { .. } => 2,
            NormModel::Pulled { base, .. } => base.dim(),
        }
    }

    pub fn norm_at(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        match self {
            NormModel::Constant(n) => Ok(n.clone()),
            NormModel::Euclidean { q } => MinkowskiNorm::euclidean(eval_matrix(q, x)?),
            NormModel::Randers { q, b } => {
                MinkowskiNorm::randers(eval_matrix(q, x)?, eval_vector(b, x)?)
            }
            NormModel::TranslatedBall {
                q,
                v,
                normalize_v_to,
            } => {
                let qm = eval_matrix(q, x)?;
                let mut vv = eval_vector(v, x)?;
                if let Some(target) = normalize_v_to {
                    let len = (vv.transpose() * &qm * &vv)[(0, 0)].max(0.0).sqrt();
                    if len < 1e-12 {
                        return Err(Error::VanishingVectorField { point: x.to_vec() });
                    }
                    vv *= target / len;
                }
                MinkowskiNorm::translated_ball(qm, vv)
            }
            NormModel::Rotation { base, theta } => {
                let b = base.norm_at(x)?;
                if b.dim() != 2 {
                    return Err(Error::InvalidNorm(
                        "rotation fields are two-dimensional".into(),
                    ));
                }
                let th = theta.eval(x)?;
                // F(x, xi) = base(R(-theta) xi), i.e. a pullback by R(theta)
                MinkowskiNorm::pulled(b, rotation_matrix(th))
            }
            NormModel::Pulled { base, a } => {
                MinkowskiNorm::pulled(base.norm_at(x)?, eval_matrix(a, x)?)
            }
        }
    }
}

/// A chart together with a pointwise Minkowski norm.
#[derive(Debug, Clone)]
pub struct FinslerField {
    pub chart: Chart,
    pub model: NormModel,
}

impl FinslerField {
    pub fn new(chart: Chart, model: NormModel) -> Result<FinslerField> {
        chart.validate()?;
        if chart.dim() != model.dim() {
            return Err(Error::Chart(format!(
                "chart dimension {} does not match norm dimension {}",
                chart.dim(),
                model.dim()
            )));
        }
        Ok(FinslerField { chart, model })
    }

    /// The same Minkowski norm at every point (a Minkowski space chart).
    pub fn constant(chart: Chart, norm: MinkowskiNorm) -> Result<FinslerField> {
        FinslerField::new(chart, NormModel::Constant(norm))
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn norm_at(&self, x: &[f64]) -> Result<MinkowskiNorm> {
        self.model.norm_at(x)
    }
}

/// Field-level validation: norm invariants at every node plus a finite
/// difference continuity budget between neighbors.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FieldValidationReport {
    pub valid: bool,
    pub worst_node: Vec<f64>,
    pub worst_report: ValidationReport,
    /// max over edges of |F(x,u) - F(x',u)| / |x - x'| on probe directions
    pub lipschitz_observed: f64,
    pub lipschitz_budget: f64,
}

/// Validate the field on a grid.
pub fn validate_field(
    field: &FinslerField,
    grid: &Grid,
    samples_per_node: usize,
    seed: u64,
    tol: f64,
    lipschitz_budget: f64,
) -> Result<FieldValidationReport> {
    let n = field.dim();
    let reports: Vec<Result<ValidationReport>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let x = grid.point(node);
            let norm = field.norm_at(&x)?;
            validate_norm(&norm, samples_per_node, seed, tol)
        })
        .collect();
    let mut worst_idx = 0usize;
    let mut worst_score = -1.0f64;
    let mut all_valid = true;
    let mut collected = Vec::with_capacity(grid.len());
    for (i, r) in reports.into_iter().enumerate() {
        let rep = r?;
        let score = rep
            .homogeneity_worst
            .max(rep.triangle_worst)
            .max(-rep.positivity_min);
        if score > worst_score {
            worst_score = score;
            worst_idx = i;
        }
        all_valid &= rep.valid;
        collected.push(rep);
    }
    // continuity probe along grid edges
    let mut rng = crate::rng::rng_from(crate::rng::derive_seed(seed, "field-lipschitz"));
    let probes: Vec<DVector<f64>> = (0..8).map(|_| crate::rng::unit_vector(&mut rng, n)).collect();
    let mut lip: f64 = 0.0;
    for node in 0..grid.len() {
        let x = grid.point(node);
        let norm = field.norm_at(&x)?;
        for axis in 0..grid.dim() {
            if let Some(nb) = grid.neighbor(node, axis, 1) {
                let y = grid.point(nb);
                let h = grid.spacing(axis);
                let norm_y = field.norm_at(&y)?;
                for u in &probes {
                    let df = (norm.eval(u.as_slice()) - norm_y.eval(u.as_slice())).abs();
                    lip = lip.max(df / h);
                }
            }
        }
    }
    Ok(FieldValidationReport {
        valid: all_valid && lip <= lipschitz_budget,
        worst_node: grid.point(worst_idx),
        worst_report: collected[worst_idx].clone(),
        lipschitz_observed: lip,
        lipschitz_budget,
    })
}

/// The Randers-type norm whose unit ball is the V-translation of the Q-unit
/// ball. Errors when |V|_Q >= 1 (the translated body would no longer contain
/// the origin in its interior).
pub fn randers_from_translation(q: DMatrix<f64>, v: DVector<f64>) -> Result<MinkowskiNorm> {
    MinkowskiNorm::translated_ball(q, v)
}

/// Torus field of translated-ball norms: at x the unit ball of g(x) is
/// shifted by V(x) normalized to g-length `spec.target_length`.
pub fn torus_randers_field(
    g: Vec<Vec<Expression>>,
    spec: VectorFieldSpec,
    periods: Vec<f64>,
) -> Result<FinslerField> {
    let chart = Chart::Torus { periods };
    FinslerField::new(
        chart,
        NormModel::TranslatedBall {
            q: g,
            v: spec.components,
            normalize_v_to: Some(spec.target_length),
        },
    )
}

/// Two-dimensional rotation field F(x, xi) = base(R(-theta(x)) xi).
pub fn rotation_field(
    base: MinkowskiNorm,
    theta: Expression,
    periods: Vec<f64>,
) -> Result<FinslerField> {
    if base.dim() != 2 {
        return Err(Error::InvalidNorm(
            "rotation fields require a 2-dimensional base norm".into(),
        ));
    }
    let chart = Chart::Torus { periods };
    FinslerField::new(
        chart,
        NormModel::Rotation {
            base: Box::new(NormModel::Constant(base)),
            theta,
        },
    )
}

/// Closed-form connection of a rotation field: Gamma_i(x) = -theta_{,i}(x) J
/// with J the standard symplectic matrix. Derivatives are taken analytically
/// on the expression tree.
pub fn analytic_gamma_rotation(theta: &Expression, grid: &Grid) -> Result<ConnectionGrid> {
    assert_eq!(grid.dim(), 2, "rotation fields are two-dimensional");
    let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let dthetas: Vec<Expression> = (0..2).map(|i| theta.derivative(i)).collect();
    let mut gammas: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(grid.len()); 2];
    for node in 0..grid.len() {
        let x = grid.point(node);
        for (axis, dth) in dthetas.iter().enumerate() {
            gammas[axis].push(&j * (-dth.eval(&x)?));
        }
    }
    ConnectionGrid::new(grid.clone(), gammas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;
    use nalgebra::{DMatrix, DVector};

    fn id_exprs(n: usize, vars: &[&str]) -> Vec<Vec<Expression>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| Expression::constant(if i == j { 1.0 } else { 0.0 }, vars))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn translation_of_zero_is_euclidean() {
        let norm = randers_from_translation(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap();
        let mut rng = crate::rng::rng_from(4);
        for _ in 0..100 {
            let xi = crate::rng::normal_vector(&mut rng, 2);
            assert!((norm.eval(xi.as_slice()) - xi.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_too_large_rejected() {
        assert!(randers_from_translation(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0])
        )
        .is_err());
    }

    #[test]
    fn translated_ball_boundary_membership() {
        // boundary of the unit ball is {V + y : |y|_Q = 1}
        let q = DMatrix::identity(2, 2);
        let vv = DVector::from_vec(vec![0.5, 0.0]);
        let norm = randers_from_translation(q, vv.clone()).unwrap();
        let mut rng = crate::rng::rng_from(8);
        for _ in 0..1000 {
            let y = crate::rng::unit_vector(&mut rng, 2);
            let boundary = &vv + &y;
            let f = norm.eval(boundary.as_slice());
            assert!((f - 1.0).abs() < 1e-10, "F = {f}");
        }
    }

    #[test]
    fn rotating_vector_field_normalizes_to_half() {
        let vars = ["x1", "x2"];
        let spec = VectorFieldSpec::new(
            vec![
                Expression::parse("cos(2*pi*x1)", &vars).unwrap(),
                Expression::parse("sin(2*pi*x1)", &vars).unwrap(),
            ],
            0.5,
        );
        let field =
            torus_randers_field(id_exprs(2, &vars), spec, vec![1.0, 1.0]).unwrap();
        let grid = Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![16, 16],
        )
        .unwrap();
        for node in 0..grid.len() {
            let x = grid.point(node);
            let norm = field.norm_at(&x).unwrap();
            match norm {
                MinkowskiNorm::TranslatedBall { v, .. } => {
                    assert!((v.norm() - 0.5).abs() < 1e-12);
                }
                other => panic!("unexpected family {other:?}"),
            }
        }
    }

    #[test]
    fn vanishing_vector_field_is_reported() {
        let vars = ["x1", "x2"];
        let spec = VectorFieldSpec::new(
            vec![
                Expression::parse("x1 - 0.5", &vars).unwrap(),
                Expression::constant(0.0, &vars),
            ],
            0.5,
        );
        let field =
            torus_randers_field(id_exprs(2, &vars), spec, vec![1.0, 1.0]).unwrap();
        let err = field.norm_at(&[0.5, 0.25]).unwrap_err();
        assert!(matches!(err, Error::VanishingVectorField { .. }));
    }

    #[test]
    fn rotation_field_evaluates_pullback() {
        let base =
            MinkowskiNorm::randers(DMatrix::identity(2, 2), DVector::from_vec(vec![0.5, 0.0]))
                .unwrap();
        let theta = Expression::parse("0.3*sin(2*pi*x1)", &["x1", "x2"]).unwrap();
        let field = rotation_field(base.clone(), theta.clone(), vec![1.0, 1.0]).unwrap();
        let mut rng = crate::rng::rng_from(6);
        for _ in 0..50 {
            let x = [rand::Rng::random::<f64>(&mut rng), rand::Rng::random::<f64>(&mut rng)];
            let th = theta.eval(&x).unwrap();
            let xi = crate::rng::normal_vector(&mut rng, 2);
            let norm = field.norm_at(&x).unwrap();
            let rot = rotation_matrix(-th);
            let expect = base.eval((&rot * &xi).as_slice());
            assert!((norm.eval(xi.as_slice()) - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_theta_gives_zero_gamma() {
        let theta = Expression::constant(0.7, &["x1", "x2"]);
        let grid = Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        let conn = analytic_gamma_rotation(&theta, &grid).unwrap();
        for axis in 0..2 {
            for node in 0..grid.len() {
                assert_eq!(conn.gammas[axis][node].abs().max(), 0.0);
            }
        }
    }

    #[test]
    fn linear_theta_gives_constant_gamma() {
        // theta = a x1: Gamma_1 = -a J, Gamma_2 = 0
        let theta = Expression::parse("0.25*x1", &["x1", "x2"]).unwrap();
        let grid = Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        let conn = analytic_gamma_rotation(&theta, &grid).unwrap();
        let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        for node in 0..grid.len() {
            assert!((&conn.gammas[0][node] - &j * (-0.25)).abs().max() < 1e-15);
            assert!(conn.gammas[1][node].abs().max() < 1e-15);
        }
    }

    #[test]
    fn field_validation_accepts_smooth_randers_field() {
        let vars = ["x1", "x2"];
        let b = vec![
            Expression::parse("0.3 + 0.1*sin(2*pi*x1)", &vars).unwrap(),
            Expression::constant(0.0, &vars),
        ];
        let field = FinslerField::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            NormModel::Randers {
                q: id_exprs(2, &vars),
                b,
            },
        )
        .unwrap();
        let grid = Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        let report = validate_field(&field, &grid, 100, 3, 1e-9, 10.0).unwrap();
        assert!(report.valid, "{report:?}");
        assert!(report.lipschitz_observed < 1.0);
    }
}
