//! Construction and verification of the associated affine connection.
//!
//! Given a monochromatic field, a smooth family of isometries
//! `B(x): T_pM -> T_xM` is continued over the grid by Newton iteration on the
//! anchor equations, sweeping breadth-first out of the basepoint so every
//! solve starts inside the local uniqueness basin. Christoffel matrices are
//! `Gamma_i = -d_i B  B^{-1}`; their parallel transport reproduces `B(y) B(x)^{-1}`
//! and therefore preserves the Finsler function. Curvature and holonomy
//! provide the independent checks.

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::fields::FinslerField;
use crate::grid::{Chart, Grid, MatrixFieldSampler};
use crate::isometry::{solve_anchors, SourceNormData};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

/// Newton solve and certification settings for [`solve_frame_field`].
#[derive(Debug, Clone, Serialize)]
pub struct SolveParams {
    pub newton_tol: f64,
    pub max_iters: usize,
    /// certification threshold, relative to the defect scale at the basepoint
    pub accept_tol: f64,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            newton_tol: 1e-12,
            max_iters: 50,
            accept_tol: 1e-6,
        }
    }
}

/// The solved isomorphism field `B(x): T_pM -> T_xM` in chart coordinates,
/// with local-branch directional derivatives and per-point certificates.
#[derive(Debug, Clone)]
pub struct IsomorphismField {
    pub grid: Grid,
    pub basepoint_node: usize,
    /// chart-coordinate maps, one per node
    pub maps: Vec<DMatrix<f64>>,
    /// d_i B at each node (axis-major: derivs[axis][node])
    pub derivs: Vec<Vec<DMatrix<f64>>>,
    /// certified defect phi(B(x)) per node
    pub defects: Vec<f64>,
    /// worst anchor residual per node
    pub anchor_residuals: Vec<f64>,
    /// defect scale at the basepoint
    pub defect_scale: f64,
}

impl IsomorphismField {
    /// Build from explicit maps, taking derivatives by plain grid stencils
    /// on the stored values (no local recontinuation). Intended for tests
    /// and analytically known fields.
    pub fn from_maps(grid: Grid, basepoint_node: usize, maps: Vec<DMatrix<f64>>) -> Self {
        let n = grid.dim();
        let mut derivs = vec![Vec::with_capacity(grid.len()); n];
        for node in 0..grid.len() {
            for (axis, axis_derivs) in derivs.iter_mut().enumerate() {
                let h = grid.spacing(axis);
                let mut d = DMatrix::zeros(maps[node].nrows(), maps[node].ncols());
                for (off, c) in grid.derivative_stencil(node, axis) {
                    let nb = grid
                        .neighbor(node, axis, off)
                        .expect("stencil stays on the grid");
                    d += &maps[nb] * (c / h);
                }
                axis_derivs.push(d);
            }
        }
        let len = grid.len();
        IsomorphismField {
            grid,
            basepoint_node,
            maps,
            derivs,
            defects: vec![0.0; len],
            anchor_residuals: vec![0.0; len],
            defect_scale: 1.0,
        }
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_anchor_residual(&self) -> f64 {
        self.anchor_residuals.iter().cloned().fold(0.0, f64::max)
    }
}

/// Continue the frame-coordinate solution `R` from a solved value at one
/// point to a nearby point, tracking the branch.
///
/// The anchor equations have solutions besides the isometry family (the set
/// U' is larger than U); Newton from the warm start can capture one when the
/// grid step is coarse. Candidates are therefore screened with the cheap
/// search-quadrature defect — exactly zero on the true branch regardless of
/// quadrature — and on rejection the start is perturbed along the isotropy
/// complement, nearest perturbation first, so the accepted solution is the
/// branch closest to the predecessor.
fn continue_to(
    field: &FinslerField,
    src: &SourceNormData,
    frame: &DMatrix<f64>,
    x: &[f64],
    r_start: &DMatrix<f64>,
    params: &SolveParams,
) -> Result<DMatrix<f64>> {
    let norm_x = field.norm_at(x)?;
    let framed_x = norm_x.with_linear_arg(frame)?;
    let solve = |start: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        solve_anchors(&framed_x, src, start, params.newton_tol, params.max_iters).map_err(|e| {
            match e {
                Error::NewtonDiverged {
                    iters, residual, ..
                } => Error::NewtonDiverged {
                    point: x.to_vec(),
                    iters,
                    residual,
                },
                other => other,
            }
        })
    };
    // wrong U'-branches sit at defect O(0.1) x scale; the true branch at ~0
    let branch_tol = 1e-4 * src.search_eval.scale;
    let mut best: Option<(DMatrix<f64>, f64)> = None;
    let mut first_err: Option<Error> = None;
    let mut consider = |r: Result<DMatrix<f64>>,
                        best: &mut Option<(DMatrix<f64>, f64)>|
     -> Option<DMatrix<f64>> {
        match r {
            Ok(b) => {
                let d = src.search_eval.defect(&framed_x, &b);
                if d <= branch_tol {
                    return Some(b);
                }
                if best.as_ref().is_none_or(|(_, bd)| d < *bd) {
                    *best = Some((b, d));
                }
                None
            }
            Err(e) => {
                first_err.get_or_insert(e);
                None
            }
        }
    };
    if let Some(b) = consider(solve(r_start), &mut best) {
        return Ok(b);
    }
    for step in [0.1, 0.25, 0.5, 1.0] {
        for w in &src.isotropy.complement {
            for sign in [1.0f64, -1.0] {
                let start = r_start * (w * (sign * step)).exp();
                if let Some(b) = consider(solve(&start), &mut best) {
                    return Ok(b);
                }
            }
        }
    }
    // nothing certified: return the best anchor solution found and let the
    // full-quadrature certificate report the failure with its defect
    match best {
        Some((b, _)) => Ok(b),
        None => Err(first_err.expect("at least one start attempted")),
    }
}

/// Solve for the isomorphism field over the grid.
///
/// `src` holds the anchor system of the basepoint norm (already framed);
/// `frame_field` the Binet-Legendre frames at every node. Points are visited
/// in a deterministic breadth-first sweep from the basepoint, each initialized
/// from its sweep predecessor; every node is then certified against the
/// defect threshold and differentiated along its own local branch.
pub fn solve_frame_field(
    field: &FinslerField,
    grid: &Grid,
    src: &SourceNormData,
    frame_field: &crate::blmetric::FrameField,
    basepoint: &[f64],
    params: &SolveParams,
) -> Result<IsomorphismField> {
    let n = grid.dim();
    let p_node = grid.nearest_node(basepoint);
    let e_p_inv = frame_field.frames[p_node]
        .clone()
        .try_inverse()
        .expect("frames are invertible");

    // phase 1: breadth-first continuation of the frame-coordinate solution
    let mut frame_sol: Vec<Option<DMatrix<f64>>> = vec![None; grid.len()];
    for ring in grid.bfs_rings(p_node) {
        let solved: Vec<(usize, Result<DMatrix<f64>>)> = ring
            .par_iter()
            .map(|(node, pred)| {
                let x = grid.point(*node);
                let start = match pred {
                    None => DMatrix::identity(n, n),
                    Some(pn) => frame_sol[*pn].clone().expect("predecessor solved"),
                };
                let r = continue_to(
                    field,
                    src,
                    &frame_field.frames[*node],
                    &x,
                    &start,
                    params,
                );
                (*node, r)
            })
            .collect();
        for (node, r) in solved {
            frame_sol[node] = Some(r?);
        }
    }

    // phase 2: certification and local-branch derivatives, per node
    let accept = params.accept_tol * src.certify_eval.scale;
    let per_node: Vec<Result<(DMatrix<f64>, Vec<DMatrix<f64>>, f64, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let x = grid.point(node);
            let r = frame_sol[node].clone().expect("all nodes solved");
            let norm_x = field.norm_at(&x)?;
            let framed_x = norm_x.with_linear_arg(&frame_field.frames[node])?;
            // certification: anchors alone only pin the solution set; the
            // defect promotes anchor preservation to all of T_pM
            let defect = src.certify_eval.defect(&framed_x, &r);
            if !(defect <= accept) {
                return Err(Error::CertificateFailed {
                    point: x.clone(),
                    defect,
                    tol: accept,
                });
            }
            let mut residual = 0.0f64;
            for (xi, c) in src.anchors.vectors.iter().zip(&src.targets) {
                residual = residual.max((framed_x.eval((&r * xi).as_slice()) - c).abs());
            }
            let map = &frame_field.frames[node] * &r * &e_p_inv;
            // local-branch stencil: neighbors are re-continued from this
            // node's solution, so seams and monodromy cannot contaminate
            // the derivative
            let mut derivs = Vec::with_capacity(n);
            for axis in 0..n {
                let h = grid.spacing(axis);
                let mut d = DMatrix::zeros(n, n);
                for (off, coeff) in grid.derivative_stencil(node, axis) {
                    let value = if off == 0 {
                        map.clone()
                    } else {
                        let nb = grid
                            .neighbor(node, axis, off)
                            .expect("stencil stays on the grid");
                        let xb = grid.point(nb);
                        let rb = continue_to(
                            field,
                            src,
                            &frame_field.frames[nb],
                            &xb,
                            &r,
                            params,
                        )?;
                        &frame_field.frames[nb] * &rb * &e_p_inv
                    };
                    d += value * (coeff / h);
                }
                derivs.push(d);
            }
            Ok((map, derivs, defect, residual))
        })
        .collect();

    let mut maps = Vec::with_capacity(grid.len());
    let mut derivs: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(grid.len()); n];
    let mut defects = Vec::with_capacity(grid.len());
    let mut residuals = Vec::with_capacity(grid.len());
    for r in per_node {
        let (map, d, defect, residual) = r?;
        maps.push(map);
        for (axis, dd) in d.into_iter().enumerate() {
            derivs[axis].push(dd);
        }
        defects.push(defect);
        residuals.push(residual);
    }
    Ok(IsomorphismField {
        grid: grid.clone(),
        basepoint_node: p_node,
        maps,
        derivs,
        defects,
        anchor_residuals: residuals,
        defect_scale: src.certify_eval.scale,
    })
}

/// Christoffel matrices on the grid: `(Gamma_i)^j_s = Gamma^j_{s i}`.
#[derive(Debug, Clone)]
pub struct ConnectionGrid {
    pub grid: Grid,
    /// gammas[axis][node]
    pub gammas: Vec<Vec<DMatrix<f64>>>,
}

impl ConnectionGrid {
    pub fn new(grid: Grid, gammas: Vec<Vec<DMatrix<f64>>>) -> Result<ConnectionGrid> {
        let n = grid.dim();
        if gammas.len() != n || gammas.iter().any(|g| g.len() != grid.len()) {
            return Err(Error::Chart(
                "connection grid shape does not match the grid".into(),
            ));
        }
        for axis in &gammas {
            for m in axis {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("Christoffel matrix entry".into()));
                }
            }
        }
        Ok(ConnectionGrid { grid, gammas })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn max_abs(&self) -> f64 {
        self.gammas
            .iter()
            .flatten()
            .map(|m| m.abs().max())
            .fold(0.0, f64::max)
    }
}

/// `Gamma_i(x) = -(d_i B)(x) B(x)^{-1}` from a solved isomorphism field.
pub fn christoffels(iso: &IsomorphismField) -> Result<ConnectionGrid> {
    let n = iso.grid.dim();
    let mut gammas: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(iso.grid.len()); n];
    for node in 0..iso.grid.len() {
        let inv = iso.maps[node].clone().try_inverse().ok_or_else(|| {
            Error::NotSpd(format!(
                "isomorphism field is singular at node {node} (certified fields cannot be)"
            ))
        })?;
        for (axis, out) in gammas.iter_mut().enumerate() {
            out.push(-(&iso.derivs[axis][node] * &inv));
        }
    }
    ConnectionGrid::new(iso.grid.clone(), gammas)
}

/// A curve in the chart.
#[derive(Debug, Clone)]
pub enum Curve {
    Polyline(Vec<Vec<f64>>),
    Expr {
        components: Vec<Expression>,
        velocity: Vec<Expression>,
    },
    /// Closed loop `x(t) = center + sum_k a_k cos(2 pi k t) + b_k sin(2 pi k t)`.
    Fourier {
        center: Vec<f64>,
        /// per harmonic k: (cos coefficients, sin coefficients)
        harmonics: Vec<(Vec<f64>, Vec<f64>)>,
    },
    /// `x(t) = from + (to - from) t + sum_k w_k sin(pi k t)`; endpoints exact.
    Bridge {
        from: Vec<f64>,
        to: Vec<f64>,
        wiggles: Vec<Vec<f64>>,
    },
}

impl Curve {
    pub fn from_exprs(components: Vec<Expression>) -> Curve {
        let velocity = components.iter().map(|e| e.derivative(0)).collect();
        Curve::Expr {
            components,
            velocity,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Curve::Polyline(pts) => pts[0].len(),
            Curve::Expr { components, .. } => components.len(),
            Curve::Fourier { center, .. } => center.len(),
            Curve::Bridge { from, .. } => from.len(),
        }
    }

    pub fn point(&self, t: f64) -> Result<Vec<f64>> {
        match self {
            Curve::Polyline(pts) => {
                let segs = pts.len() - 1;
                let s = (t.clamp(0.0, 1.0) * segs as f64).min(segs as f64 - 1e-12);
                let k = s.floor() as usize;
                let frac = s - k as f64;
                Ok(pts[k]
                    .iter()
                    .zip(&pts[k + 1])
                    .map(|(a, b)| a + frac * (b - a))
                    .collect())
            }
            Curve::Expr { components, .. } => components
                .iter()
                .map(|e| e.eval(&[t]).map_err(Error::from))
                .collect(),
            Curve::Fourier { center, harmonics } => {
                let mut x = center.clone();
                for (k, (a, b)) in harmonics.iter().enumerate() {
                    let w = 2.0 * std::f64::consts::PI * (k as f64 + 1.0) * t;
                    let (s, c) = w.sin_cos();
                    for i in 0..x.len() {
                        x[i] += a[i] * c + b[i] * s;
                    }
                }
                Ok(x)
            }
            Curve::Bridge { from, to, wiggles } => {
                let mut x: Vec<f64> = from
                    .iter()
                    .zip(to)
                    .map(|(f, g)| f + (g - f) * t)
                    .collect();
                for (k, w) in wiggles.iter().enumerate() {
                    let s = (std::f64::consts::PI * (k as f64 + 1.0) * t).sin();
                    for i in 0..x.len() {
                        x[i] += w[i] * s;
                    }
                }
                Ok(x)
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Result<Vec<f64>> {
        match self {
            Curve::Polyline(pts) => {
                let segs = pts.len() - 1;
                let s = (t.clamp(0.0, 1.0) * segs as f64).min(segs as f64 - 1e-12);
                let k = s.floor() as usize;
                Ok(pts[k]
                    .iter()
                    .zip(&pts[k + 1])
                    .map(|(a, b)| (b - a) * segs as f64)
                    .collect())
            }
            Curve::Expr { velocity, .. } => velocity
                .iter()
                .map(|e| e.eval(&[t]).map_err(Error::from))
                .collect(),
            Curve::Fourier { center, harmonics } => {
                let mut v = vec![0.0; center.len()];
                for (k, (a, b)) in harmonics.iter().enumerate() {
                    let om = 2.0 * std::f64::consts::PI * (k as f64 + 1.0);
                    let (s, c) = (om * t).sin_cos();
                    for i in 0..v.len() {
                        v[i] += om * (-a[i] * s + b[i] * c);
                    }
                }
                Ok(v)
            }
            Curve::Bridge { from, to, wiggles } => {
                let mut v: Vec<f64> = from.iter().zip(to).map(|(f, g)| g - f).collect();
                for (k, w) in wiggles.iter().enumerate() {
                    let om = std::f64::consts::PI * (k as f64 + 1.0);
                    let c = (om * t).cos();
                    for i in 0..v.len() {
                        v[i] += w[i] * om * c;
                    }
                }
                Ok(v)
            }
        }
    }

    /// Parameter values of interior kinks (polyline vertices).
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Curve::Polyline(pts) => {
                let segs = pts.len() - 1;
                (1..segs).map(|k| k as f64 / segs as f64).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Seeded random smooth curves inside a chart: alternating closed Fourier
/// loops and endpoint-pinned bridges. On box charts amplitudes shrink until
/// the samples stay inside.
pub fn random_curves(chart: &Chart, count: usize, seed: u64) -> Vec<Curve> {
    let n = chart.dim();
    let mut rng = crate::rng::rng_from(crate::rng::derive_seed(seed, "random-curves"));
    let extents: Vec<f64> = match chart {
        Chart::Torus { periods } => periods.clone(),
        Chart::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| h - l).collect(),
    };
    let origin: Vec<f64> = match chart {
        Chart::Torus { .. } => vec![0.0; n],
        Chart::Box { lo, .. } => lo.clone(),
    };
    let mut curves = Vec::with_capacity(count);
    for idx in 0..count {
        let curve = loop {
            let candidate = if idx % 2 == 0 {
                let center: Vec<f64> = (0..n)
                    .map(|i| origin[i] + rand::Rng::random::<f64>(&mut rng) * extents[i])
                    .collect();
                let harmonics: Vec<(Vec<f64>, Vec<f64>)> = (1..=3)
                    .map(|k| {
                        let amp = 0.12 / k as f64;
                        let a: Vec<f64> = (0..n)
                            .map(|i| crate::rng::normal_vector(&mut rng, 1)[0] * amp * extents[i])
                            .collect();
                        let b: Vec<f64> = (0..n)
                            .map(|i| crate::rng::normal_vector(&mut rng, 1)[0] * amp * extents[i])
                            .collect();
                        (a, b)
                    })
                    .collect();
                Curve::Fourier { center, harmonics }
            } else {
                let from: Vec<f64> = (0..n)
                    .map(|i| origin[i] + rand::Rng::random::<f64>(&mut rng) * extents[i])
                    .collect();
                let to: Vec<f64> = (0..n)
                    .map(|i| origin[i] + rand::Rng::random::<f64>(&mut rng) * extents[i])
                    .collect();
                let wiggles: Vec<Vec<f64>> = (1..=2)
                    .map(|k| {
                        (0..n)
                            .map(|i| {
                                crate::rng::normal_vector(&mut rng, 1)[0] * 0.08 / k as f64
                                    * extents[i]
                            })
                            .collect()
                    })
                    .collect();
                Curve::Bridge { from, to, wiggles }
            };
            if chart.is_torus() {
                break candidate;
            }
            // shrink-and-retry for boxes: accept when samples stay inside
            let inside = (0..=32).all(|s| {
                candidate
                    .point(s as f64 / 32.0)
                    .map(|p| chart.contains(&p))
                    .unwrap_or(false)
            });
            if inside {
                break candidate;
            }
        };
        curves.push(curve);
    }
    curves
}

/// Seeded random closed loops: Fourier loops plus winding loops along each
/// torus axis (a bridge from p to p + period is closed on the torus).
pub fn random_loops(chart: &Chart, count: usize, seed: u64) -> Vec<Curve> {
    let n = chart.dim();
    let mut rng = crate::rng::rng_from(crate::rng::derive_seed(seed, "random-loops"));
    let mut loops = Vec::with_capacity(count);
    for idx in 0..count {
        if chart.is_torus() && idx % 4 == 3 {
            // winding loop along one axis
            let periods = match chart {
                Chart::Torus { periods } => periods.clone(),
                Chart::Box { .. } => unreachable!(),
            };
            let axis = idx / 4 % n;
            let from: Vec<f64> = (0..n)
                .map(|i| rand::Rng::random::<f64>(&mut rng) * periods[i])
                .collect();
            let mut to = from.clone();
            to[axis] += periods[axis];
            let wiggles: Vec<Vec<f64>> = (1..=2)
                .map(|k| {
                    (0..n)
                        .map(|i| {
                            crate::rng::normal_vector(&mut rng, 1)[0] * 0.06 / k as f64
                                * periods[i]
                        })
                        .collect()
                })
                .collect();
            loops.push(Curve::Bridge { from, to, wiggles });
        } else {
            let mut sub = random_curves(chart, 2, crate::rng::derive_seed(seed, &format!("loop-{idx}")));
            loops.push(sub.swap_remove(0)); // even index: Fourier loop
        }
    }
    loops
}

/// Transport integration settings.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransportParams {
    pub steps: usize,
    /// spectral upsampling target per axis on 2D torus charts
    pub fine_resolution: usize,
}

impl Default for TransportParams {
    fn default() -> Self {
        TransportParams {
            steps: 1000,
            fine_resolution: 256,
        }
    }
}

/// Interpolating sampler for the connection, ready for transport integration.
pub struct TransportSampler {
    sampler: MatrixFieldSampler,
    chart: Chart,
    n: usize,
}

impl TransportSampler {
    pub fn new(conn: &ConnectionGrid, params: &TransportParams) -> TransportSampler {
        let n = conn.dim();
        let sampler = MatrixFieldSampler::new(conn.grid.clone(), &conn.gammas);
        // spectral upsampling pays off only on periodic charts; in 3D the
        // memory cost outweighs the benefit at the tested resolutions
        let sampler = if n == 2 {
            sampler.upsampled(params.fine_resolution)
        } else {
            sampler
        };
        TransportSampler {
            sampler,
            chart: conn.grid.chart.clone(),
            n,
        }
    }

    /// Transport the full identity basis along the curve: integrates
    /// `V' = -(sum_i gammadot^i Gamma_i(gamma)) V` with RK4.
    pub fn transport_matrix(&self, curve: &Curve, steps: usize) -> Result<DMatrix<f64>> {
        let n = self.n;
        let mut gammas: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(n, n)).collect();
        let mut rhs = |t: f64, v: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let x = curve.point(t)?;
            if !self.chart.contains(&x) {
                return Err(Error::CurveExitsChart { t, point: x });
            }
            let dx = curve.velocity(t)?;
            self.sampler.sample_into(&x, &mut gammas);
            let mut a = DMatrix::zeros(n, n);
            for (g, d) in gammas.iter().zip(&dx) {
                a += g * (-d);
            }
            Ok(a * v)
        };
        // integrate segment-wise so polyline kinks stay on step boundaries
        let mut knots = vec![0.0];
        knots.extend(curve.breakpoints());
        knots.push(1.0);
        let mut v = DMatrix::identity(n, n);
        for w in knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg_steps = ((b - a) * steps as f64).ceil().max(1.0) as usize;
            let dt = (b - a) / seg_steps as f64;
            let mut t = a;
            for _ in 0..seg_steps {
                let k1 = rhs(t, &v)?;
                let k2 = rhs(t + 0.5 * dt, &(&v + &k1 * (0.5 * dt)))?;
                let k3 = rhs(t + 0.5 * dt, &(&v + &k2 * (0.5 * dt)))?;
                let k4 = rhs(t + dt, &(&v + &k3 * dt))?;
                v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                t += dt;
            }
        }
        Ok(v)
    }

    pub fn transport(&self, curve: &Curve, v0: &DVector<f64>, steps: usize) -> Result<DVector<f64>> {
        Ok(self.transport_matrix(curve, steps)? * v0)
    }
}

/// RK4 parallel transport of `v0` along `curve` (convenience wrapper that
/// builds the sampler; batch callers should reuse a [`TransportSampler`]).
pub fn parallel_transport(
    conn: &ConnectionGrid,
    curve: &Curve,
    v0: &DVector<f64>,
    steps: usize,
) -> Result<DVector<f64>> {
    TransportSampler::new(conn, &TransportParams::default()).transport(curve, v0, steps)
}

/// Transport the identity basis around a closed loop.
pub fn holonomy(conn: &ConnectionGrid, loop_curve: &Curve, steps: usize) -> Result<DMatrix<f64>> {
    TransportSampler::new(conn, &TransportParams::default()).transport_matrix(loop_curve, steps)
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveVerification {
    pub index: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub pass: bool,
    pub tol: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub curves: usize,
    pub vectors_per_curve: usize,
    pub per_curve: Vec<CurveVerification>,
}

/// Check that parallel transport preserves the Finsler function: for each
/// curve and seeded vector, `|F(end, P v) - F(start, v)| / F(start, v)`.
pub fn verify_preservation(
    field: &FinslerField,
    conn: &ConnectionGrid,
    curves: &[Curve],
    vectors_per_curve: usize,
    tol: f64,
    transport: &TransportParams,
    seed: u64,
) -> Result<VerificationReport> {
    let n = conn.dim();
    let sampler = TransportSampler::new(conn, transport);
    let results: Vec<Result<CurveVerification>> = curves
        .par_iter()
        .enumerate()
        .map(|(index, curve)| {
            let p = sampler.transport_matrix(curve, transport.steps)?;
            let start = curve.point(0.0)?;
            let end = curve.point(1.0)?;
            let norm_start = field.norm_at(&start)?;
            let norm_end = field.norm_at(&end)?;
            let mut rng = crate::rng::rng_from(crate::rng::derive_seed(
                seed,
                &format!("verify-curve-{index}"),
            ));
            let mut max_err = 0.0f64;
            let mut sum = 0.0f64;
            for _ in 0..vectors_per_curve {
                let v = crate::rng::unit_vector(&mut rng, n);
                let f0 = norm_start.eval(v.as_slice());
                let f1 = norm_end.eval((&p * &v).as_slice());
                let err = (f1 - f0).abs() / f0;
                max_err = max_err.max(err);
                sum += err;
            }
            Ok(CurveVerification {
                index,
                max_rel_error: max_err,
                mean_rel_error: sum / vectors_per_curve.max(1) as f64,
            })
        })
        .collect();
    let mut per_curve = Vec::with_capacity(curves.len());
    for r in results {
        per_curve.push(r?);
    }
    let max_rel_error = per_curve.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let mean_rel_error = if per_curve.is_empty() {
        0.0
    } else {
        per_curve.iter().map(|c| c.mean_rel_error).sum::<f64>() / per_curve.len() as f64
    };
    Ok(VerificationReport {
        pass: max_rel_error <= tol,
        tol,
        max_rel_error,
        mean_rel_error,
        curves: curves.len(),
        vectors_per_curve,
        per_curve,
    })
}

/// Curvature matrices `R_{il} = d_i Gamma_l - d_l Gamma_i + [Gamma_i, Gamma_l]`
/// for index pairs i < l, by second-order central differences of the stored
/// Christoffels.
#[derive(Debug, Clone)]
pub struct CurvatureGrid {
    pub grid: Grid,
    /// index pairs (i, l), i < l
    pub pairs: Vec<(usize, usize)>,
    /// values[pair][node]
    pub values: Vec<Vec<DMatrix<f64>>>,
}

impl CurvatureGrid {
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|m| m.abs().max())
            .fold(0.0, f64::max)
    }
}

pub fn curvature(conn: &ConnectionGrid) -> Result<CurvatureGrid> {
    let n = conn.dim();
    let grid = &conn.grid;
    let deriv = |axis_of_gamma: usize, along: usize, node: usize| -> DMatrix<f64> {
        let h = grid.spacing(along);
        let mut d = DMatrix::zeros(n, n);
        // plain second-order central differences (one-sided at box edges)
        let stencil: Vec<(isize, f64)> = {
            let full = grid.derivative_stencil(node, along);
            if full.iter().any(|(o, _)| o.abs() > 1) {
                vec![(-1, -0.5), (1, 0.5)]
            } else {
                full
            }
        };
        for (off, c) in stencil {
            let nb = grid
                .neighbor(node, along, off)
                .expect("stencil stays on the grid");
            d += &conn.gammas[axis_of_gamma][nb] * (c / h);
        }
        d
    };
    let mut pairs = Vec::new();
    for i in 0..n {
        for l in (i + 1)..n {
            pairs.push((i, l));
        }
    }
    let values: Vec<Vec<DMatrix<f64>>> = pairs
        .par_iter()
        .map(|(i, l)| {
            (0..grid.len())
                .map(|node| {
                    let gi = &conn.gammas[*i][node];
                    let gl = &conn.gammas[*l][node];
                    deriv(*l, *i, node) - deriv(*i, *l, node) + gi * gl - gl * gi
                })
                .collect()
        })
        .collect();
    Ok(CurvatureGrid {
        grid: grid.clone(),
        pairs,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;
    use crate::fields::rotation_matrix;
    use nalgebra::{DMatrix, DVector};

    fn torus2(res: usize) -> Grid {
        Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![res, res],
        )
        .unwrap()
    }

    fn zero_connection(grid: &Grid) -> ConnectionGrid {
        let n = grid.dim();
        let gammas = vec![vec![DMatrix::zeros(n, n); grid.len()]; n];
        ConnectionGrid::new(grid.clone(), gammas).unwrap()
    }

    #[test]
    fn transport_with_zero_connection_is_identity() {
        let grid = torus2(8);
        let conn = zero_connection(&grid);
        let curve = Curve::from_exprs(vec![
            Expression::parse("0.1 + 0.5*t", &["t"]).unwrap(),
            Expression::parse("0.2 + 0.3*t*t", &["t"]).unwrap(),
        ]);
        let v0 = DVector::from_vec(vec![0.7, -0.2]);
        let v1 = parallel_transport(&conn, &curve, &v0, 64).unwrap();
        assert!((v1 - v0).amax() < 1e-14);
    }

    #[test]
    fn constant_commuting_gamma_integrates_to_matrix_exponential() {
        // Gamma_1 = C constant, Gamma_2 = 0, straight curve along x1:
        // V(1) = exp(-C * length)
        let grid = torus2(8);
        let c = DMatrix::from_row_slice(2, 2, &[0.0, -0.3, 0.3, 0.0]);
        let gammas = vec![
            vec![c.clone(); grid.len()],
            vec![DMatrix::zeros(2, 2); grid.len()],
        ];
        let conn = ConnectionGrid::new(grid, gammas).unwrap();
        let curve = Curve::from_exprs(vec![
            Expression::parse("0.5*t", &["t"]).unwrap(),
            Expression::constant(0.25, &["t"]),
        ]);
        let p = holonomy(&conn, &curve, 256).unwrap();
        let expect = (&c * (-0.5)).exp();
        assert!((p - expect).abs().max() < 1e-12);
    }

    #[test]
    fn curvature_of_constant_gammas_is_commutator() {
        let grid = torus2(8);
        let c1 = DMatrix::from_row_slice(2, 2, &[0.1, 0.4, -0.2, 0.3]);
        let c2 = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.2]);
        let gammas = vec![vec![c1.clone(); grid.len()], vec![c2.clone(); grid.len()]];
        let conn = ConnectionGrid::new(grid, gammas).unwrap();
        let curv = curvature(&conn).unwrap();
        let expect = &c1 * &c2 - &c2 * &c1;
        for node in 0..curv.grid.len() {
            assert!((&curv.values[0][node] - &expect).abs().max() < 1e-12);
        }
    }

    #[test]
    fn curvature_of_zero_connection_is_zero() {
        let curv = curvature(&zero_connection(&torus2(8))).unwrap();
        assert_eq!(curv.max_abs(), 0.0);
    }

    #[test]
    fn gauge_invariance_of_christoffels() {
        // replacing B(x) by B(x) C for constant invertible C leaves Gamma unchanged
        let grid = torus2(16);
        let theta = |x: &[f64]| 0.3 * (2.0 * std::f64::consts::PI * x[0]).sin();
        let maps: Vec<DMatrix<f64>> = (0..grid.len())
            .map(|i| rotation_matrix(theta(&grid.point(i))))
            .collect();
        let c = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.9]);
        let maps_c: Vec<DMatrix<f64>> = maps.iter().map(|m| m * &c).collect();
        let iso1 = IsomorphismField::from_maps(grid.clone(), 0, maps);
        let iso2 = IsomorphismField::from_maps(grid.clone(), 0, maps_c);
        let g1 = christoffels(&iso1).unwrap();
        let g2 = christoffels(&iso2).unwrap();
        for axis in 0..2 {
            for node in 0..grid.len() {
                assert!(
                    (&g1.gammas[axis][node] - &g2.gammas[axis][node]).abs().max() < 1e-12
                );
            }
        }
    }

    #[test]
    fn nabla_b_vanishes_discretely() {
        // || d_i B + Gamma_i B || is an algebraic identity of christoffels
        let grid = torus2(16);
        let theta = |x: &[f64]| {
            0.3 * (2.0 * std::f64::consts::PI * x[0]).sin()
                + 0.2 * (2.0 * std::f64::consts::PI * x[1]).cos()
        };
        let maps: Vec<DMatrix<f64>> = (0..grid.len())
            .map(|i| rotation_matrix(theta(&grid.point(i))))
            .collect();
        let iso = IsomorphismField::from_maps(grid.clone(), 0, maps);
        let conn = christoffels(&iso).unwrap();
        for node in 0..grid.len() {
            for axis in 0..2 {
                let resid = &iso.derivs[axis][node] + &conn.gammas[axis][node] * &iso.maps[node];
                assert!(resid.abs().max() <= 1e-12, "node {node} axis {axis}");
            }
        }
    }

    #[test]
    fn curve_exits_box_chart_is_an_error() {
        let grid = Grid::new(
            Chart::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        let conn = zero_connection(&grid);
        let curve = Curve::from_exprs(vec![
            Expression::parse("0.5 + t", &["t"]).unwrap(),
            Expression::constant(0.5, &["t"]),
        ]);
        let v0 = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            parallel_transport(&conn, &curve, &v0, 32),
            Err(Error::CurveExitsChart { .. })
        ));
    }

    #[test]
    fn polyline_transport_matches_expression_curve() {
        let grid = torus2(16);
        let theta = |x: &[f64]| 0.4 * (2.0 * std::f64::consts::PI * x[0]).sin();
        let maps: Vec<DMatrix<f64>> = (0..grid.len())
            .map(|i| rotation_matrix(theta(&grid.point(i))))
            .collect();
        let iso = IsomorphismField::from_maps(grid.clone(), 0, maps);
        let conn = christoffels(&iso).unwrap();
        let expr_curve = Curve::from_exprs(vec![
            Expression::parse("0.1 + 0.4*t", &["t"]).unwrap(),
            Expression::constant(0.3, &["t"]),
        ]);
        let poly = Curve::Polyline(vec![vec![0.1, 0.3], vec![0.5, 0.3]]);
        let v0 = DVector::from_vec(vec![0.3, 0.8]);
        let a = parallel_transport(&conn, &expr_curve, &v0, 400).unwrap();
        let b = parallel_transport(&conn, &poly, &v0, 400).unwrap();
        assert!((a - b).amax() < 1e-10);
    }
}
