//! Minkowski norm evaluators, their derivatives, and validation.
//!
//! A norm is one of a closed-form family: Euclidean `sqrt(xi^T Q xi)`,
//! Randers `sqrt(xi^T Q xi) + b.xi`, a translated ellipsoid (the unit ball
//! is `V + {|y|_Q <= 1}`), or a pullback `base(A^{-1} xi)` of another member.
//! All gradients are analytic; a central-difference fallback is provided as
//! an independent oracle.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A Minkowski norm on R^n.
#[derive(Debug, Clone)]
pub enum MinkowskiNorm {
    Euclidean {
        q: DMatrix<f64>,
    },
    Randers {
        q: DMatrix<f64>,
        b: DVector<f64>,
    },
    /// Unit ball is the V-translation of the Q-unit ball: F solves |xi - F V|_Q = F.
    TranslatedBall {
        q: DMatrix<f64>,
        v: DVector<f64>,
        /// cached Q v
        qv: DVector<f64>,
        /// cached 1 - |v|_Q^2
        c: f64,
    },
    Pulled {
        base: Box<MinkowskiNorm>,
        a: DMatrix<f64>,
        a_inv: DMatrix<f64>,
    },
}

fn check_square(q: &DMatrix<f64>) -> Result<usize> {
    let n = q.nrows();
    if n < 2 || q.ncols() != n {
        return Err(Error::InvalidNorm(format!(
            "Q must be square with n >= 2, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    Ok(n)
}

/// Symmetry + positive-definiteness check (Cholesky).
pub fn check_spd(q: &DMatrix<f64>, tol: f64) -> Result<()> {
    check_square(q)?;
    let asym = (q - q.transpose()).abs().max();
    if asym > tol * q.abs().max().max(1.0) {
        return Err(Error::NotSpd(format!("asymmetry {asym:.3e}")));
    }
    if q.clone().cholesky().is_none() {
        return Err(Error::NotSpd("Cholesky failed (not positive definite)".into()));
    }
    Ok(())
}

impl MinkowskiNorm {
    pub fn euclidean(q: DMatrix<f64>) -> Result<Self> {
        check_spd(&q, 1e-12)?;
        Ok(MinkowskiNorm::Euclidean { q })
    }

    /// Standard Euclidean norm on R^n.
    pub fn standard(n: usize) -> Self {
        MinkowskiNorm::Euclidean {
            q: DMatrix::identity(n, n),
        }
    }

    pub fn randers(q: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_spd(&q, 1e-12)?;
        let n = q.nrows();
        if b.len() != n {
            return Err(Error::InvalidNorm(format!(
                "b has length {} but Q is {n}x{n}",
                b.len()
            )));
        }
        let qinv_b = q
            .clone()
            .cholesky()
            .expect("checked above")
            .solve(&b);
        let bnorm2 = b.dot(&qinv_b);
        if bnorm2 >= 1.0 {
            return Err(Error::InvalidNorm(format!(
                "Randers covector inadmissible: |b|_{{Q^-1}}^2 = {bnorm2:.6} >= 1"
            )));
        }
        Ok(MinkowskiNorm::Randers { q, b })
    }

    /// Construct a Randers norm without the admissibility check (the
    /// validator must be able to examine inadmissible data).
    pub fn randers_unchecked(q: DMatrix<f64>, b: DVector<f64>) -> Self {
        MinkowskiNorm::Randers { q, b }
    }

    pub fn translated_ball(q: DMatrix<f64>, v: DVector<f64>) -> Result<Self> {
        check_spd(&q, 1e-12)?;
        let n = q.nrows();
        if v.len() != n {
            return Err(Error::InvalidNorm(format!(
                "V has length {} but Q is {n}x{n}",
                v.len()
            )));
        }
        let qv = &q * &v;
        let vqv = v.dot(&qv);
        if vqv >= 1.0 {
            return Err(Error::InvalidNorm(format!(
                "translated ball no longer contains the origin: |V|_Q^2 = {vqv:.6} >= 1"
            )));
        }
        Ok(MinkowskiNorm::TranslatedBall {
            c: 1.0 - vqv,
            q,
            v,
            qv,
        })
    }

    pub fn pulled(base: MinkowskiNorm, a: DMatrix<f64>) -> Result<Self> {
        let n = base.dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::InvalidNorm(format!(
                "pullback matrix is {}x{}, norm dimension is {n}",
                a.nrows(),
                a.ncols()
            )));
        }
        let a_inv = a.clone().try_inverse().ok_or_else(|| {
            Error::InvalidNorm("pullback matrix is singular".into())
        })?;
        Ok(MinkowskiNorm::Pulled {
            base: Box::new(base),
            a,
            a_inv,
        })
    }

    /// The norm `xi -> self(M xi)` (self composed with a linear map).
    ///
    /// Used to express a norm in a frame: if E is a frame matrix, the framed
    /// norm is `self.with_linear_arg(E)`.
    pub fn with_linear_arg(&self, m: &DMatrix<f64>) -> Result<Self> {
        let m_inv = m.clone().try_inverse().ok_or_else(|| {
            Error::InvalidNorm("frame matrix is singular".into())
        })?;
        Ok(MinkowskiNorm::Pulled {
            base: Box::new(self.clone()),
            a: m_inv,
            a_inv: m.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            MinkowskiNorm::Euclidean { q } => q.nrows(),
            MinkowskiNorm::Randers { q, .. } => q.nrows(),
            MinkowskiNorm::TranslatedBall { q, .. } => q.nrows(),
            MinkowskiNorm::Pulled { base, .. } => base.dim(),
        }
    }

    /// Evaluate F(xi). Assumes finite input; see [`eval_norm`] for the
    /// checked entry point.
    pub fn eval(&self, xi: &[f64]) -> f64 {
        match self {
            MinkowskiNorm::Euclidean { q } => quad_form(q, xi).max(0.0).sqrt(),
            MinkowskiNorm::Randers { q, b } => {
                quad_form(q, xi).max(0.0).sqrt() + dot(b.as_slice(), xi)
            }
            MinkowskiNorm::TranslatedBall { qv, c, q, .. } => {
                // positive root of F^2 c + 2 F <xi,V>_Q - |xi|_Q^2 = 0
                let s = dot(qv.as_slice(), xi);
                let r = quad_form(q, xi);
                (-s + (s * s + c * r).max(0.0).sqrt()) / c
            }
            MinkowskiNorm::Pulled { base, a_inv, .. } => {
                let n = xi.len();
                if n <= STACK_DIM {
                    let mut buf = [0.0f64; STACK_DIM];
                    mat_vec_into(a_inv, xi, &mut buf[..n]);
                    base.eval(&buf[..n])
                } else {
                    let mut buf = vec![0.0; n];
                    mat_vec_into(a_inv, xi, &mut buf);
                    base.eval(&buf)
                }
            }
        }
    }

    /// Gradient dF at `xi != 0` (as a vector of partials). Assumes nonzero
    /// finite input; see [`grad_norm`] for the checked entry point.
    pub fn grad(&self, xi: &[f64]) -> DVector<f64> {
        match self {
            MinkowskiNorm::Euclidean { q } => {
                let qxi = mat_vec(q, xi);
                let f = quad_form(q, xi).max(0.0).sqrt();
                qxi / f
            }
            MinkowskiNorm::Randers { q, b } => {
                let qxi = mat_vec(q, xi);
                let f = quad_form(q, xi).max(0.0).sqrt();
                qxi / f + b
            }
            MinkowskiNorm::TranslatedBall { qv, c, q, .. } => {
                let s = dot(qv.as_slice(), xi);
                let r = quad_form(q, xi);
                let root = (s * s + c * r).max(0.0).sqrt();
                let qxi = mat_vec(q, xi);
                ((s / root - 1.0) * qv + (qxi / root) * *c) / *c
            }
            MinkowskiNorm::Pulled { base, a_inv, .. } => {
                let y = mat_vec(a_inv, xi);
                let g = base.grad(y.as_slice());
                // chain rule: grad = A^{-T} grad_base(A^{-1} xi)
                a_inv.transpose() * g
            }
        }
    }

    /// True when this norm is reversible-Riemannian by construction
    /// (Euclidean family up to pullbacks).
    pub fn is_quadratic(&self) -> bool {
        match self {
            MinkowskiNorm::Euclidean { .. } => true,
            MinkowskiNorm::Randers { b, .. } => b.amax() == 0.0,
            MinkowskiNorm::TranslatedBall { v, .. } => v.amax() == 0.0,
            MinkowskiNorm::Pulled { base, .. } => base.is_quadratic(),
        }
    }
}

const STACK_DIM: usize = 8;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn quad_form(q: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let col = q.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += col[i] * x[i];
        }
        acc += s * x[j];
    }
    acc
}

#[inline]
fn mat_vec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut s = 0.0;
        for (j, xj) in x.iter().enumerate() {
            s += m[(i, j)] * xj;
        }
        *o = s;
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    mat_vec_into(m, x, out.as_mut_slice());
    out
}

/// Checked evaluation: rejects non-finite input.
pub fn eval_norm(norm: &MinkowskiNorm, xi: &DVector<f64>) -> Result<f64> {
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("eval_norm argument {xi:?}")));
    }
    Ok(norm.eval(xi.as_slice()))
}

/// Checked gradient: rejects non-finite input and the origin (F is smooth
/// only on the slit tangent bundle).
pub fn grad_norm(norm: &MinkowskiNorm, xi: &DVector<f64>) -> Result<DVector<f64>> {
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("grad_norm argument {xi:?}")));
    }
    if xi.amax() == 0.0 {
        return Err(Error::GradientAtOrigin);
    }
    Ok(norm.grad(xi.as_slice()))
}

/// Central-difference gradient with step h = eps^(1/3) |xi|; independent
/// oracle for the analytic gradients.
pub fn fd_grad(norm: &MinkowskiNorm, xi: &DVector<f64>) -> DVector<f64> {
    let n = xi.len();
    let h = f64::EPSILON.cbrt() * xi.norm();
    let mut g = DVector::zeros(n);
    let mut plus = xi.clone();
    let mut minus = xi.clone();
    for i in 0..n {
        plus[i] = xi[i] + h;
        minus[i] = xi[i] - h;
        g[i] = (norm.eval(plus.as_slice()) - norm.eval(minus.as_slice())) / (2.0 * h);
        plus[i] = xi[i];
        minus[i] = xi[i];
    }
    g
}

/// Per-condition worst violations found by [`validate_norm`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    /// worst relative |F(lambda xi) - lambda F(xi)| / F(xi)
    pub homogeneity_worst: f64,
    /// worst relative subadditivity excess (F(xi+eta) - F(xi) - F(eta))+ / (F(xi)+F(eta))
    pub triangle_worst: f64,
    /// minimum of F over sampled unit directions (positivity requires > tol)
    pub positivity_min: f64,
    pub samples: usize,
    pub tol: f64,
}

/// Check the Minkowski norm conditions on seeded random samples.
///
/// Violations are reported, not thrown: an invalid norm yields
/// `valid == false` with the worst violation per condition.
pub fn validate_norm(
    norm: &MinkowskiNorm,
    sample_count: usize,
    seed: u64,
    tol: f64,
) -> Result<ValidationReport> {
    if sample_count < 1 {
        return Err(Error::InvalidNorm("sample_count must be >= 1".into()));
    }
    let n = norm.dim();
    let mut rng = crate::rng::rng_from(crate::rng::derive_seed(seed, "validate-norm"));
    let lambdas = [0.5, 2.0, 7.0];
    let mut homog: f64 = 0.0;
    let mut triangle: f64 = 0.0;
    let mut pos_min = f64::INFINITY;
    for _ in 0..sample_count {
        let xi = crate::rng::unit_vector(&mut rng, n);
        let eta = crate::rng::unit_vector(&mut rng, n);
        let f_xi = norm.eval(xi.as_slice());
        let f_eta = norm.eval(eta.as_slice());
        pos_min = pos_min.min(f_xi);
        let denom = f_xi.abs().max(1e-30);
        for lam in lambdas {
            let scaled = norm.eval((&xi * lam).as_slice());
            homog = homog.max((scaled - lam * f_xi).abs() / denom);
        }
        // F(0) = 0 exactly (lambda = 0 case of homogeneity)
        let zero = norm.eval(DVector::<f64>::zeros(n).as_slice());
        homog = homog.max(zero.abs());
        let f_sum = norm.eval((&xi + &eta).as_slice());
        let excess = f_sum - f_xi - f_eta;
        if excess > 0.0 {
            triangle = triangle.max(excess / (f_xi + f_eta).abs().max(1e-30));
        }
    }
    let valid = homog <= tol && triangle <= tol && pos_min > tol;
    Ok(ValidationReport {
        valid,
        homogeneity_worst: homog,
        triangle_worst: triangle,
        positivity_min: pos_min,
        samples: sample_count,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn id(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(vals)
    }

    #[test]
    fn randers_closed_form_values() {
        let norm = MinkowskiNorm::randers(id(2), v(&[0.5, 0.0])).unwrap();
        assert!((norm.eval(&[1.0, 0.0]) - 1.5).abs() < 1e-15);
        // irreversibility: F(-xi) != F(xi)
        assert!((norm.eval(&[-1.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn translated_ball_matches_bisection_oracle() {
        // independent oracle: solve |xi - F V|_Q = F by bisection
        let q = id(2);
        let vv = v(&[0.5, 0.0]);
        let norm = MinkowskiNorm::translated_ball(q.clone(), vv.clone()).unwrap();
        let oracle = |xi: &DVector<f64>| -> f64 {
            let g = |f: f64| {
                let y = xi - &vv * f;
                (y.transpose() * &q * &y)[(0, 0)].sqrt() - f
            };
            let (mut lo, mut hi) = (0.0, 100.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        for xi in [v(&[1.0, 0.0]), v(&[-1.0, 0.0]), v(&[0.0, 1.0]), v(&[0.3, -0.7])] {
            let f = norm.eval(xi.as_slice());
            assert!((f - oracle(&xi)).abs() < 1e-10, "xi={xi:?}");
        }
        // spec values
        assert!((norm.eval(&[1.0, 0.0]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((norm.eval(&[-1.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((norm.eval(&[0.0, 1.0]) - 2.0 / 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn translated_ball_agrees_with_randers_closed_form() {
        // F(xi) = (-<xi,V>_Q + sqrt(<xi,V>_Q^2 + (1-|V|_Q^2)|xi|_Q^2)) / (1-|V|_Q^2)
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let vv = v(&[0.4, -0.2]);
        let norm = MinkowskiNorm::translated_ball(q.clone(), vv.clone()).unwrap();
        let mut rng = crate::rng::rng_from(9);
        for _ in 0..200 {
            let xi = crate::rng::normal_vector(&mut rng, 2);
            let s = (xi.transpose() * &q * &vv)[(0, 0)];
            let c = 1.0 - (vv.transpose() * &q * &vv)[(0, 0)];
            let r = (xi.transpose() * &q * &xi)[(0, 0)];
            let closed = (-s + (s * s + c * r).sqrt()) / c;
            assert!((norm.eval(xi.as_slice()) - closed).abs() <= 1e-12 * closed.max(1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let norms = vec![
            MinkowskiNorm::euclidean(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]))
                .unwrap(),
            MinkowskiNorm::randers(id(2), v(&[0.5, 0.1])).unwrap(),
            MinkowskiNorm::translated_ball(id(2), v(&[0.3, 0.4])).unwrap(),
            MinkowskiNorm::pulled(
                MinkowskiNorm::randers(id(2), v(&[0.5, 0.0])).unwrap(),
                DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.1, 0.8]),
            )
            .unwrap(),
            MinkowskiNorm::randers(id(3), v(&[0.2, 0.1, -0.3])).unwrap(),
        ];
        let mut rng = crate::rng::rng_from(11);
        for norm in &norms {
            for _ in 0..50 {
                let xi = crate::rng::unit_vector(&mut rng, norm.dim()) * 1.7;
                let g = norm.grad(xi.as_slice());
                let gfd = fd_grad(norm, &xi);
                assert!(
                    (&g - &gfd).amax() < 1e-7,
                    "analytic {g:?} vs fd {gfd:?} for {norm:?}"
                );
            }
        }
    }

    #[test]
    fn euclidean_gradient_example() {
        let norm = MinkowskiNorm::standard(2);
        let g = norm.grad(&[3.0, 4.0]);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn randers_gradient_example() {
        let norm = MinkowskiNorm::randers(id(2), v(&[0.5, 0.0])).unwrap();
        let g = norm.grad(&[0.0, 1.0]);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euler_relation_holds() {
        let norms = vec![
            MinkowskiNorm::randers(id(2), v(&[0.5, 0.0])).unwrap(),
            MinkowskiNorm::translated_ball(id(3), v(&[0.3, 0.2, 0.1])).unwrap(),
        ];
        let mut rng = crate::rng::rng_from(12);
        for norm in &norms {
            for _ in 0..100 {
                let xi = crate::rng::normal_vector(&mut rng, norm.dim());
                if xi.norm() < 1e-6 {
                    continue;
                }
                let f = norm.eval(xi.as_slice());
                let g = norm.grad(xi.as_slice());
                assert!((g.dot(&xi) - f).abs() <= 1e-8 * f.abs());
            }
        }
    }

    #[test]
    fn grad_at_origin_is_domain_error() {
        let norm = MinkowskiNorm::standard(2);
        assert!(matches!(
            grad_norm(&norm, &v(&[0.0, 0.0])),
            Err(Error::GradientAtOrigin)
        ));
    }

    #[test]
    fn eval_rejects_non_finite() {
        let norm = MinkowskiNorm::standard(2);
        assert!(eval_norm(&norm, &v(&[f64::NAN, 0.0])).is_err());
        assert!(eval_norm(&norm, &v(&[f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn validation_passes_for_valid_norms() {
        let report = validate_norm(&MinkowskiNorm::standard(2), 1000, 5, 1e-12).unwrap();
        assert!(report.valid, "{report:?}");
        assert!(report.homogeneity_worst <= 1e-12);
        assert!(report.triangle_worst <= 1e-12);

        let pulled = MinkowskiNorm::pulled(
            MinkowskiNorm::standard(2),
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 0.5]),
        )
        .unwrap();
        let report = validate_norm(&pulled, 1000, 5, 1e-10).unwrap();
        assert!(report.valid, "{report:?}");
    }

    #[test]
    fn inadmissible_randers_fails_positivity() {
        let bad = MinkowskiNorm::randers_unchecked(id(2), v(&[1.01, 0.0]));
        let report = validate_norm(&bad, 2000, 5, 1e-9).unwrap();
        assert!(!report.valid);
        assert!(report.positivity_min < 0.0, "{report:?}");
        // and the strict constructor rejects it outright
        assert!(MinkowskiNorm::randers(id(2), v(&[1.01, 0.0])).is_err());
    }

    #[test]
    fn translated_ball_rejects_outside_vector() {
        assert!(MinkowskiNorm::translated_ball(id(2), v(&[1.0, 0.5])).is_err());
    }

    #[test]
    fn homogeneity_across_family() {
        let norms = vec![
            MinkowskiNorm::standard(2),
            MinkowskiNorm::randers(id(2), v(&[0.5, 0.0])).unwrap(),
            MinkowskiNorm::translated_ball(id(2), v(&[0.5, 0.0])).unwrap(),
        ];
        let mut rng = crate::rng::rng_from(3);
        for norm in &norms {
            for _ in 0..100 {
                let xi = crate::rng::normal_vector(&mut rng, 2);
                let f = norm.eval(xi.as_slice());
                for lam in [0.5, 2.0, 7.0] {
                    let s = norm.eval((&xi * lam).as_slice());
                    assert!((s - lam * f).abs() <= 1e-12 * f.abs().max(1e-300) * lam.max(1.0));
                }
            }
        }
    }
}
