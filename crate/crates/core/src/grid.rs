//! Coordinate charts, grids, finite differences, and interpolation.
//!
//! Charts are either a box `[lo, hi]^n` or a flat torus with given periods.
//! Torus grids wrap; box grids use one-sided stencils at the boundary.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Chart {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Torus { periods: Vec<f64> },
}

impl Chart {
    pub fn dim(&self) -> usize {
        match self {
            Chart::Box { lo, .. } => lo.len(),
            Chart::Torus { periods } => periods.len(),
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, Chart::Torus { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Chart::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.len() < 2 {
                    return Err(Error::Chart("box bounds must have equal length >= 2".into()));
                }
                for (l, h) in lo.iter().zip(hi) {
                    if !(l.is_finite() && h.is_finite() && l < h) {
                        return Err(Error::Chart(format!("invalid box bounds [{l}, {h}]")));
                    }
                }
            }
            Chart::Torus { periods } => {
                if periods.len() < 2 {
                    return Err(Error::Chart("torus needs at least 2 periods".into()));
                }
                for p in periods {
                    if !(p.is_finite() && *p > 0.0) {
                        return Err(Error::Chart(format!("invalid period {p}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether `x` lies inside the chart (tori always contain everything).
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Chart::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(xi, (l, h))| *xi >= *l - 1e-12 && *xi <= *h + 1e-12),
            Chart::Torus { .. } => true,
        }
    }
}

/// A rectilinear grid over a chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub chart: Chart,
    pub res: Vec<usize>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(chart: Chart, res: Vec<usize>) -> Result<Grid> {
        chart.validate()?;
        if res.len() != chart.dim() {
            return Err(Error::Chart(format!(
                "resolution has {} axes, chart has {}",
                res.len(),
                chart.dim()
            )));
        }
        if res.iter().any(|r| *r < 4) {
            return Err(Error::Chart(
                "resolution must be at least 4 per axis".into(),
            ));
        }
        let n = res.len();
        let mut strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * res[i + 1];
        }
        Ok(Grid {
            chart,
            res,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.res.len()
    }

    pub fn len(&self) -> usize {
        self.res.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid spacing along `axis`.
    pub fn spacing(&self, axis: usize) -> f64 {
        match &self.chart {
            Chart::Box { lo, hi } => (hi[axis] - lo[axis]) / (self.res[axis] - 1) as f64,
            Chart::Torus { periods } => periods[axis] / self.res[axis] as f64,
        }
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.strides
            .iter()
            .zip(&self.res)
            .map(|(s, r)| {
                let k = rest / s;
                rest %= s;
                debug_assert!(k < *r);
                k
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(k, s)| k * s)
            .sum()
    }

    /// Coordinates of node `flat`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let multi = self.multi_index(flat);
        match &self.chart {
            Chart::Box { lo, .. } => multi
                .iter()
                .enumerate()
                .map(|(i, k)| lo[i] + *k as f64 * self.spacing(i))
                .collect(),
            Chart::Torus { .. } => multi
                .iter()
                .enumerate()
                .map(|(i, k)| *k as f64 * self.spacing(i))
                .collect(),
        }
    }

    /// Offset node coordinates: the point of node `flat` displaced by
    /// `step` grid cells along `axis` (well-defined even off-grid on boxes).
    pub fn offset_point(&self, flat: usize, axis: usize, step: isize) -> Vec<f64> {
        let mut p = self.point(flat);
        p[axis] += step as f64 * self.spacing(axis);
        p
    }

    /// Neighbor node index, wrapping on tori; None off the edge of a box.
    pub fn neighbor(&self, flat: usize, axis: usize, step: isize) -> Option<usize> {
        let mut multi = self.multi_index(flat);
        let r = self.res[axis] as isize;
        let k = multi[axis] as isize + step;
        match &self.chart {
            Chart::Torus { .. } => {
                multi[axis] = k.rem_euclid(r) as usize;
                Some(self.flat_index(&multi))
            }
            Chart::Box { .. } => {
                if k < 0 || k >= r {
                    None
                } else {
                    multi[axis] = k as usize;
                    Some(self.flat_index(&multi))
                }
            }
        }
    }

    /// Nearest grid node to `x` (wrapping on tori).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let n = self.dim();
        let mut multi = vec![0usize; n];
        for i in 0..n {
            match &self.chart {
                Chart::Box { lo, .. } => {
                    let k = ((x[i] - lo[i]) / self.spacing(i)).round();
                    multi[i] = (k.max(0.0) as usize).min(self.res[i] - 1);
                }
                Chart::Torus { periods } => {
                    let k = (x[i].rem_euclid(periods[i]) / self.spacing(i)).round() as usize;
                    multi[i] = k % self.res[i];
                }
            }
        }
        self.flat_index(&multi)
    }

    /// Deterministic breadth-first order from `start`: (node, predecessor).
    /// Neighbors are enqueued in axis order, +1 before -1.
    pub fn bfs_order(&self, start: usize) -> Vec<(usize, Option<usize>)> {
        self.bfs_rings(start).into_iter().flatten().collect()
    }

    /// Breadth-first order grouped by distance ring. Nodes within a ring
    /// depend only on predecessors in earlier rings, so a ring may be
    /// processed in parallel.
    pub fn bfs_rings(&self, start: usize) -> Vec<Vec<(usize, Option<usize>)>> {
        let mut visited = vec![false; self.len()];
        let mut rings: Vec<Vec<(usize, Option<usize>)>> = Vec::new();
        visited[start] = true;
        let mut frontier: Vec<(usize, Option<usize>)> = vec![(start, None)];
        while !frontier.is_empty() {
            let mut next: Vec<(usize, Option<usize>)> = Vec::new();
            for (node, _) in &frontier {
                for axis in 0..self.dim() {
                    for step in [1isize, -1] {
                        if let Some(nb) = self.neighbor(*node, axis, step) {
                            if !visited[nb] {
                                visited[nb] = true;
                                next.push((nb, Some(*node)));
                            }
                        }
                    }
                }
            }
            rings.push(std::mem::replace(&mut frontier, next));
        }
        rings
    }

    /// Finite-difference stencil (offsets in cells, coefficients in units of
    /// 1/h) for the first derivative along `axis` at node `flat`.
    ///
    /// Central differences of order up to 6 where the window allows;
    /// one-sided second order at box edges.
    pub fn derivative_stencil(&self, flat: usize, axis: usize) -> Vec<(isize, f64)> {
        let r = self.res[axis];
        let radius_cap = ((r - 1) / 2).min(3).max(1);
        let radius = match &self.chart {
            Chart::Torus { .. } => radius_cap,
            Chart::Box { .. } => {
                let k = self.multi_index(flat)[axis];
                let dist = k.min(r - 1 - k);
                dist.min(radius_cap)
            }
        };
        match radius {
            0 => {
                // box edge: one-sided second order
                let k = self.multi_index(flat)[axis];
                if k == 0 {
                    vec![(0, -1.5), (1, 2.0), (2, -0.5)]
                } else {
                    vec![(0, 1.5), (-1, -2.0), (-2, 0.5)]
                }
            }
            1 => vec![(-1, -0.5), (1, 0.5)],
            2 => vec![
                (-2, 1.0 / 12.0),
                (-1, -2.0 / 3.0),
                (1, 2.0 / 3.0),
                (2, -1.0 / 12.0),
            ],
            _ => vec![
                (-3, -1.0 / 60.0),
                (-2, 3.0 / 20.0),
                (-1, -3.0 / 4.0),
                (1, 3.0 / 4.0),
                (2, -3.0 / 20.0),
                (3, 1.0 / 60.0),
            ],
        }
    }

    /// Fractional grid coordinates of a point (units of cells per axis).
    fn fractional(&self, x: &[f64]) -> Vec<f64> {
        match &self.chart {
            Chart::Box { lo, .. } => x
                .iter()
                .enumerate()
                .map(|(i, xi)| (xi - lo[i]) / self.spacing(i))
                .collect(),
            Chart::Torus { periods } => x
                .iter()
                .enumerate()
                .map(|(i, xi)| xi.rem_euclid(periods[i]) / self.spacing(i))
                .collect(),
        }
    }
}

/// Cubic Lagrange interpolation weights for nodes at offsets {-1, 0, 1, 2}
/// and fractional position `t` in [0,1). Exact for cubics, error O(h^4).
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let a = t + 1.0;
    let b = t;
    let c = t - 1.0;
    let d = t - 2.0;
    [
        -b * c * d / 6.0,
        a * c * d / 2.0,
        -a * b * d / 2.0,
        a * b * c / 6.0,
    ]
}

/// Multi-matrix field on a grid with cubic (Catmull-Rom) sampling.
///
/// Stores `fields` matrices per node, each `rows x cols`, entry-major for
/// cache-friendly interpolation. On tori the indexing wraps; on boxes the
/// taps clamp to the boundary.
#[derive(Debug, Clone)]
pub struct MatrixFieldSampler {
    grid: Grid,
    fields: usize,
    rows: usize,
    cols: usize,
    /// data[field * rows*cols + (r*cols+c)][node]
    data: Vec<Vec<f64>>,
}

impl MatrixFieldSampler {
    /// Build from per-node matrices; `values[f][node]` is the f-th matrix.
    pub fn new(grid: Grid, values: &[Vec<DMatrix<f64>>]) -> MatrixFieldSampler {
        let fields = values.len();
        let (rows, cols) = (values[0][0].nrows(), values[0][0].ncols());
        let len = grid.len();
        let mut data = vec![vec![0.0; len]; fields * rows * cols];
        for (f, per_node) in values.iter().enumerate() {
            assert_eq!(per_node.len(), len);
            for (node, m) in per_node.iter().enumerate() {
                for r in 0..rows {
                    for c in 0..cols {
                        data[f * rows * cols + r * cols + c][node] = m[(r, c)];
                    }
                }
            }
        }
        MatrixFieldSampler {
            grid,
            fields,
            rows,
            cols,
            data,
        }
    }

    /// Spectrally upsample a torus-chart sampler to at least `target` nodes
    /// per axis (no-op for box charts or if already fine enough).
    pub fn upsampled(&self, target: usize) -> MatrixFieldSampler {
        if !self.grid.chart.is_torus() || self.grid.res.iter().all(|r| *r >= target) {
            return self.clone();
        }
        let fine_res: Vec<usize> = self.grid.res.iter().map(|r| (*r).max(target)).collect();
        let fine_grid = Grid::new(self.grid.chart.clone(), fine_res.clone())
            .expect("fine grid of valid grid");
        let data = self
            .data
            .iter()
            .map(|field| spectral_upsample(&self.grid.res, field, &fine_res))
            .collect();
        MatrixFieldSampler {
            grid: fine_grid,
            fields: self.fields,
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Sample all matrix fields at `x` into `out` (length `fields`).
    pub fn sample_into(&self, x: &[f64], out: &mut [DMatrix<f64>]) {
        let n = self.grid.dim();
        debug_assert!(n <= 3, "sampler supports n <= 3");
        let frac = self.grid.fractional(x);
        let mut base = vec![0isize; n];
        let mut w = vec![[0.0f64; 4]; n];
        for i in 0..n {
            let f = frac[i];
            let i0 = f.floor();
            base[i] = i0 as isize;
            w[i] = cubic_weights(f - i0);
        }
        let torus = self.grid.chart.is_torus();
        let clamp = |k: isize, r: usize| -> usize {
            if torus {
                k.rem_euclid(r as isize) as usize
            } else {
                k.clamp(0, r as isize - 1) as usize
            }
        };
        // gather the 4^n node indices and combined weights
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4usize.pow(n as u32));
        match n {
            2 => {
                for a in 0..4usize {
                    let ia = clamp(base[0] - 1 + a as isize, self.grid.res[0]);
                    for b in 0..4usize {
                        let ib = clamp(base[1] - 1 + b as isize, self.grid.res[1]);
                        let node = ia * self.grid.strides[0] + ib;
                        taps.push((node, w[0][a] * w[1][b]));
                    }
                }
            }
            3 => {
                for a in 0..4usize {
                    let ia = clamp(base[0] - 1 + a as isize, self.grid.res[0]);
                    for b in 0..4usize {
                        let ib = clamp(base[1] - 1 + b as isize, self.grid.res[1]);
                        for c in 0..4usize {
                            let ic = clamp(base[2] - 1 + c as isize, self.grid.res[2]);
                            let node = ia * self.grid.strides[0]
                                + ib * self.grid.strides[1]
                                + ic;
                            taps.push((node, w[0][a] * w[1][b] * w[2][c]));
                        }
                    }
                }
            }
            _ => panic!("sampler supports n in {{2, 3}}"),
        }
        for (f, m) in out.iter_mut().enumerate() {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let field = &self.data[f * self.rows * self.cols + r * self.cols + c];
                    let mut acc = 0.0;
                    for (node, weight) in &taps {
                        acc += weight * field[*node];
                    }
                    m[(r, c)] = acc;
                }
            }
        }
    }
}

/// Zero-padded FFT upsampling of a periodic scalar field, one axis at a time.
fn spectral_upsample(res: &[usize], field: &[f64], fine_res: &[usize]) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let mut cur: Vec<f64> = field.to_vec();
    let mut cur_res: Vec<usize> = res.to_vec();
    for axis in 0..res.len() {
        if fine_res[axis] > cur_res[axis] {
            cur = upsample_axis(&mut planner, &cur, &cur_res, axis, fine_res[axis]);
            cur_res[axis] = fine_res[axis];
        }
    }
    cur
}

/// Trigonometric interpolation of every grid line along `axis` from length
/// `res[axis]` to `fine`.
fn upsample_axis(
    planner: &mut FftPlanner<f64>,
    data: &[f64],
    res: &[usize],
    axis: usize,
    fine: usize,
) -> Vec<f64> {
    let n = res.len();
    let r = res[axis];
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * res[i + 1];
    }
    let mut out_res = res.to_vec();
    out_res[axis] = fine;
    let mut out_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_res[i + 1];
    }
    let out_len: usize = out_res.iter().product();
    let mut out = vec![0.0; out_len];
    let fwd = planner.plan_fft_forward(r);
    let inv = planner.plan_fft_inverse(fine);
    let lines: usize = res.iter().product::<usize>() / r;
    let mut line = vec![Complex::new(0.0, 0.0); r];
    let mut padded = vec![Complex::new(0.0, 0.0); fine];
    for l in 0..lines {
        // base offsets of the l-th line in input and output layouts
        let mut rem = l;
        let mut base = 0usize;
        let mut obase = 0usize;
        for i in (0..n).rev() {
            if i == axis {
                continue;
            }
            let k = rem % res[i];
            rem /= res[i];
            base += k * strides[i];
            obase += k * out_strides[i];
        }
        for (j, item) in line.iter_mut().enumerate() {
            *item = Complex::new(data[base + j * strides[axis]], 0.0);
        }
        fwd.process(&mut line);
        padded.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (k, s) in line.iter().enumerate() {
            if r % 2 == 0 && k == r / 2 {
                // split the Nyquist bin to keep the interpolant real
                padded[r / 2] += s * 0.5;
                padded[fine - r / 2] += s * 0.5;
            } else if k <= r / 2 {
                padded[k] = *s;
            } else {
                padded[fine - (r - k)] = *s;
            }
        }
        inv.process(&mut padded);
        for (j, item) in padded.iter().enumerate() {
            out[obase + j * out_strides[axis]] = item.re / r as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus2(res: usize) -> Grid {
        Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0],
            },
            vec![res, res],
        )
        .unwrap()
    }

    #[test]
    fn rejects_small_resolution() {
        assert!(Grid::new(
            Chart::Torus {
                periods: vec![1.0, 1.0]
            },
            vec![2, 8]
        )
        .is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::new(
            Chart::Box {
                lo: vec![0.0, -1.0, 2.0],
                hi: vec![1.0, 1.0, 3.0],
            },
            vec![4, 5, 6],
        )
        .unwrap();
        for flat in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(flat)), flat);
        }
    }

    #[test]
    fn torus_neighbors_wrap() {
        let g = torus2(8);
        let corner = g.flat_index(&[0, 0]);
        let left = g.neighbor(corner, 0, -1).unwrap();
        assert_eq!(g.multi_index(left), vec![7, 0]);
        let b = Grid::new(
            Chart::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        assert!(b.neighbor(b.flat_index(&[0, 0]), 0, -1).is_none());
    }

    #[test]
    fn bfs_visits_everything_once_from_any_start() {
        let g = torus2(6);
        let order = g.bfs_order(g.flat_index(&[3, 2]));
        assert_eq!(order.len(), g.len());
        let mut seen = vec![false; g.len()];
        for (node, pred) in &order {
            assert!(!seen[*node]);
            seen[*node] = true;
            if let Some(p) = pred {
                assert!(seen[*p], "predecessor must precede node");
            }
        }
    }

    #[test]
    fn stencils_differentiate_trig_exactly_enough() {
        let g = torus2(32);
        let h = g.spacing(0);
        let f = |x: &[f64]| (2.0 * std::f64::consts::PI * x[0]).sin();
        let df = |x: &[f64]| 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x[0]).cos();
        let mut worst: f64 = 0.0;
        for node in 0..g.len() {
            let st = g.derivative_stencil(node, 0);
            let mut d = 0.0;
            for (off, c) in &st {
                let p = g.point(g.neighbor(node, 0, *off).unwrap());
                d += c * f(&p);
            }
            d /= h;
            worst = worst.max((d - df(&g.point(node))).abs());
        }
        // 6th order at res 32: (2 pi)^7 h^6 / 140 ~ 2e-5
        assert!(worst < 5e-5, "worst stencil error {worst}");
    }

    #[test]
    fn box_edge_stencils_are_one_sided() {
        let g = Grid::new(
            Chart::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            vec![8, 8],
        )
        .unwrap();
        let corner = g.flat_index(&[0, 3]);
        let st = g.derivative_stencil(corner, 0);
        assert!(st.iter().all(|(off, _)| *off >= 0));
        // quadratic exactness of the one-sided formula
        let h = g.spacing(0);
        let f = |x: f64| 1.0 + 2.0 * x + 3.0 * x * x;
        let d: f64 = st
            .iter()
            .map(|(off, c)| c * f(*off as f64 * h))
            .sum::<f64>()
            / h;
        assert!((d - 2.0).abs() < 1e-10, "{d}");
    }

    #[test]
    fn spectral_upsample_reproduces_band_limited_fields() {
        let g = torus2(16);
        let f = |x: &[f64]| {
            (2.0 * std::f64::consts::PI * x[0]).sin()
                * (2.0 * std::f64::consts::PI * 2.0 * x[1]).cos()
                + 0.3
        };
        let coarse: Vec<f64> = (0..g.len()).map(|i| f(&g.point(i))).collect();
        let fine = spectral_upsample(&[16, 16], &coarse, &[48, 48]);
        let gf = torus2(48);
        for i in 0..gf.len() {
            let expect = f(&gf.point(i));
            assert!(
                (fine[i] - expect).abs() < 1e-10,
                "node {i}: {} vs {expect}",
                fine[i]
            );
        }
    }

    #[test]
    fn sampler_interpolates_smooth_fields_accurately() {
        let g = torus2(32);
        let f = |x: &[f64]| {
            ((2.0 * std::f64::consts::PI * x[0]).sin()
                + (2.0 * std::f64::consts::PI * x[1]).cos())
                * 0.5
        };
        let values: Vec<Vec<DMatrix<f64>>> = vec![(0..g.len())
            .map(|i| DMatrix::from_element(1, 1, f(&g.point(i))))
            .collect()];
        let sampler = MatrixFieldSampler::new(g, &values).upsampled(128);
        let mut out = [DMatrix::zeros(1, 1)];
        let mut worst: f64 = 0.0;
        for k in 0..200 {
            let x = [
                0.013 + 0.9 * (k as f64) / 200.0,
                (0.77 * k as f64).rem_euclid(1.0),
            ];
            sampler.sample_into(&x, &mut out);
            worst = worst.max((out[0][(0, 0)] - f(&x)).abs());
        }
        assert!(worst < 3e-7, "worst interp error {worst}");
    }
}
