//! The Binet-Legendre metric and its orthonormal frames.
//!
//! For a Minkowski norm F with unit ball K, the dual form is
//! `G*_ij = (n+2)/vol(K) * int_K y_i y_j dy` and the Binet-Legendre metric is
//! `G = (G*)^{-1}`. The normalization fixes the Euclidean case: the standard
//! norm maps to the identity. The construction is natural under linear maps,
//! which is what turns norm isometries into frame-orthogonal matrices.

use crate::error::{Error, Result};
use crate::fields::FinslerField;
use crate::grid::Grid;
use crate::norms::{check_spd, MinkowskiNorm};
use crate::quadrature::{ball_second_moments, QuadParams};
use nalgebra::DMatrix;
use rayon::prelude::*;

const COND_LIMIT: f64 = 1e12;

/// Dual form `G*_ij = (n+2)/vol(K) int_K y_i y_j dy`, symmetrized.
pub fn bl_dual_form(norm: &MinkowskiNorm, params: &QuadParams) -> Result<DMatrix<f64>> {
    let n = norm.dim();
    let (vol, moments) = ball_second_moments(norm, params);
    assert!(
        vol > 0.0,
        "unit-ball volume must be positive for a valid norm"
    );
    let g = moments * ((n as f64 + 2.0) / vol);
    Ok(0.5 * (&g + g.transpose()))
}

/// The Binet-Legendre metric `G = (G*)^{-1}`.
pub fn bl_metric(norm: &MinkowskiNorm, params: &QuadParams) -> Result<DMatrix<f64>> {
    let dual = bl_dual_form(norm, params)?;
    let svd = dual.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = smax / smin.max(f64::MIN_POSITIVE);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::IllConditioned {
            cond,
            limit: COND_LIMIT,
            context: "Binet-Legendre dual form".into(),
        });
    }
    dual.try_inverse().ok_or_else(|| Error::IllConditioned {
        cond,
        limit: COND_LIMIT,
        context: "Binet-Legendre dual form inversion".into(),
    })
}

/// Orthonormal frame of an SPD matrix: `E = L^{-T}` from the Cholesky
/// factorization `G = L L^T`, so that `E^T G E = I`.
///
/// Cholesky makes the frame unique and smooth in G (no eigenvalue-ordering
/// discontinuities across a grid).
pub fn bl_frame(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(g, 1e-10)?;
    let n = g.nrows();
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
    let lt = chol.l().transpose();
    let e = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::NotSpd("singular Cholesky factor".into()))?;
    debug_assert!(((e.transpose() * g * &e) - DMatrix::identity(n, n)).abs().max() < 1e-10);
    Ok(e)
}

/// Per-node metric and frame over a grid.
#[derive(Debug, Clone)]
pub struct FrameField {
    pub metrics: Vec<DMatrix<f64>>,
    pub frames: Vec<DMatrix<f64>>,
}

/// Binet-Legendre metric and frame at every grid node.
///
/// The quadrature rule (directions, radial nodes, seed) is shared across
/// nodes, so the computed fields vary smoothly with the node coordinates.
pub fn bl_frame_field(
    field: &FinslerField,
    grid: &Grid,
    params: &QuadParams,
) -> Result<FrameField> {
    let results: Vec<Result<(DMatrix<f64>, DMatrix<f64>)>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let x = grid.point(node);
            let norm = field.norm_at(&x)?;
            let g = bl_metric(&norm, params)
                .map_err(|e| e.in_stage(&format!("bl_metric at grid point {x:?}")))?;
            let e = bl_frame(&g)
                .map_err(|err| err.in_stage(&format!("bl_frame at grid point {x:?}")))?;
            Ok((g, e))
        })
        .collect();
    let mut metrics = Vec::with_capacity(grid.len());
    let mut frames = Vec::with_capacity(grid.len());
    for r in results {
        let (g, e) = r?;
        metrics.push(g);
        frames.push(e);
    }
    Ok(FrameField { metrics, frames })
}
