//! Quadrature over unit balls of Minkowski norms.
//!
//! The ball `K = {F <= 1}` is integrated in radial decomposition
//! `int_K f = int_{S^{n-1}} int_0^{rho(u)} f(r u) r^{n-1} dr du` with
//! `rho(u) = 1/F(u)`. Directions come from deterministic sphere rules
//! (equispaced on S^1, Gauss-Legendre x uniform product on S^2, seeded
//! Monte Carlo in higher dimension), the radial part from Gauss-Legendre.
//! Shards are reduced in fixed order so results are bit-identical for a
//! given `(seed, directions, radial_nodes)` regardless of thread count.

use crate::norms::MinkowskiNorm;
use crate::rng::{self, rng_from};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Parameters of a ball quadrature rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadParams {
    pub directions: usize,
    pub radial_nodes: usize,
    pub seed: u64,
}

impl QuadParams {
    pub fn new(directions: usize, radial_nodes: usize, seed: u64) -> Self {
        QuadParams {
            directions,
            radial_nodes,
            seed,
        }
    }

    /// Defaults sized for the dimension: spectral accuracy on S^1/S^2 at
    /// interactive runtimes.
    pub fn default_for_dim(n: usize, seed: u64) -> Self {
        let directions = match n {
            2 => 4096,
            3 => 16384,
            _ => 65536,
        };
        QuadParams::new(directions, 16, seed)
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(r: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(r >= 1);
    let mut nodes = vec![0.0; r];
    let mut weights = vec![0.0; r];
    let nf = r as f64;
    for i in 0..r {
        // Chebyshev initial guess, Newton refinement on P_r
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(r, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(r, x);
        nodes[i] = 0.5 * (1.0 - x); // descending x -> ascending node order
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Legendre polynomial P_r and derivative at x.
fn legendre(r: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if r == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=r {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = r as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Surface area of the Euclidean unit sphere S^{n-1}.
pub fn sphere_area(n: usize) -> f64 {
    // 2 pi^{n/2} / Gamma(n/2)
    let half = 0.5 * n as f64;
    2.0 * std::f64::consts::PI.powf(half) / gamma(half)
}

fn gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + G + 0.5;
        for (i, &c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// A deterministic direction rule on the Euclidean unit sphere.
///
/// Weights sum to the sphere area; the seed only rotates the whole set, so
/// exactness properties of the underlying rule are preserved.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub directions: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn new(n: usize, requested: usize, seed: u64) -> SphereRule {
        assert!(n >= 2, "dimension must be at least 2");
        assert!(requested >= 1);
        match n {
            2 => Self::circle(requested, seed),
            3 => Self::product_s2(requested, seed),
            _ => Self::monte_carlo(n, requested, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Equispaced angles with a seeded offset: trapezoid rule on the circle,
    /// spectrally accurate for smooth integrands.
    fn circle(d: usize, seed: u64) -> SphereRule {
        let mut rng = rng_from(rng::derive_seed(seed, "sphere-rule"));
        let offset: f64 = 2.0 * std::f64::consts::PI * rand::Rng::random::<f64>(&mut rng);
        let w = 2.0 * std::f64::consts::PI / d as f64;
        let mut directions = Vec::with_capacity(d);
        for k in 0..d {
            let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / d as f64 + offset;
            directions.push(DVector::from_vec(vec![th.cos(), th.sin()]));
        }
        SphereRule {
            directions,
            weights: vec![w; d],
        }
    }

    /// Gauss-Legendre in cos(theta) times uniform in phi; exact for spherical
    /// harmonics up to degree ~2L. The requested count is rounded to the
    /// nearest product grid 2 L^2.
    fn product_s2(requested: usize, seed: u64) -> SphereRule {
        let l = (((requested as f64) / 2.0).sqrt().round() as usize).max(2);
        let nphi = 2 * l;
        let (mu_nodes, mu_weights) = gauss_legendre_unit(l);
        let rot = random_rotation(3, seed);
        let mut directions = Vec::with_capacity(l * nphi);
        let mut weights = Vec::with_capacity(l * nphi);
        let wphi = 2.0 * std::f64::consts::PI / nphi as f64;
        for (t, wt) in mu_nodes.iter().zip(&mu_weights) {
            let mu = 2.0 * t - 1.0; // map [0,1] -> [-1,1]
            let s = (1.0 - mu * mu).max(0.0).sqrt();
            for j in 0..nphi {
                let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / nphi as f64;
                let u = DVector::from_vec(vec![s * phi.cos(), s * phi.sin(), mu]);
                directions.push(&rot * u);
                // GL weight on [0,1] scaled to [-1,1] (factor 2)
                weights.push(2.0 * wt * wphi);
            }
        }
        SphereRule {
            directions,
            weights,
        }
    }

    fn monte_carlo(n: usize, d: usize, seed: u64) -> SphereRule {
        let mut rng = rng_from(rng::derive_seed(seed, "sphere-rule-mc"));
        let w = sphere_area(n) / d as f64;
        let directions = (0..d).map(|_| rng::unit_vector(&mut rng, n)).collect();
        SphereRule {
            directions,
            weights: vec![w; d],
        }
    }
}

/// Seeded random rotation (uniform-ish; used only to decorrelate rule axes).
fn random_rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from(rng::derive_seed(seed, "sphere-rule-rot"));
    let a = DMatrix::from_fn(n, n, |_, _| rng::normal_vector(&mut rng, 1)[0]);
    let qr = a.qr();
    let mut q = qr.q();
    if q.determinant() < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}

const SHARD: usize = 256;

/// Integrate `f` over the unit ball `K = {F <= 1}` of `norm`.
///
/// Deterministic for fixed `(seed, directions, radial_nodes)`; direction
/// shards are accumulated in fixed order regardless of parallelism.
pub fn ball_quadrature<F>(norm: &MinkowskiNorm, f: F, params: &QuadParams) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = norm.dim();
    let rule = SphereRule::new(n, params.directions, params.seed);
    let (t_nodes, t_weights) = gauss_legendre_unit(params.radial_nodes);
    let shards: Vec<f64> = rule
        .directions
        .par_chunks(SHARD)
        .zip(rule.weights.par_chunks(SHARD))
        .map(|(dirs, ws)| {
            let mut acc = 0.0;
            let mut point = vec![0.0; n];
            for (u, w) in dirs.iter().zip(ws) {
                let rho = 1.0 / norm.eval(u.as_slice());
                let mut radial = 0.0;
                for (t, wt) in t_nodes.iter().zip(&t_weights) {
                    let r = rho * t;
                    for (p, ui) in point.iter_mut().zip(u.as_slice()) {
                        *p = r * ui;
                    }
                    radial += wt * f(&point) * r.powi(n as i32 - 1);
                }
                acc += w * rho * radial;
            }
            acc
        })
        .collect();
    shards.iter().sum()
}

/// Volume and second moments of the unit ball in one pass.
///
/// The radial integrals of `1` and `y_i y_j` are polynomial in the radius,
/// so they are carried out in closed form per direction; the result is what
/// [`ball_quadrature`] produces entrywise with enough radial nodes.
pub fn ball_second_moments(norm: &MinkowskiNorm, params: &QuadParams) -> (f64, DMatrix<f64>) {
    let n = norm.dim();
    let rule = SphereRule::new(n, params.directions, params.seed);
    let shards: Vec<(f64, DMatrix<f64>)> = rule
        .directions
        .par_chunks(SHARD)
        .zip(rule.weights.par_chunks(SHARD))
        .map(|(dirs, ws)| {
            let mut vol = 0.0;
            let mut m = DMatrix::zeros(n, n);
            for (u, w) in dirs.iter().zip(ws) {
                let rho = 1.0 / norm.eval(u.as_slice());
                vol += w * rho.powi(n as i32) / n as f64;
                let c = w * rho.powi(n as i32 + 2) / (n as f64 + 2.0);
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] += c * u[i] * u[j];
                    }
                }
            }
            (vol, m)
        })
        .collect();
    let mut vol = 0.0;
    let mut m = DMatrix::zeros(n, n);
    for (v, mm) in shards {
        vol += v;
        m += mm;
    }
    (vol, m)
}

/// Lebesgue volume of the unit ball of `norm`.
pub fn ball_volume(norm: &MinkowskiNorm, params: &QuadParams) -> f64 {
    let n = norm.dim() as i32;
    let rule = SphereRule::new(norm.dim(), params.directions, params.seed);
    let shards: Vec<f64> = rule
        .directions
        .par_chunks(SHARD)
        .zip(rule.weights.par_chunks(SHARD))
        .map(|(dirs, ws)| {
            let mut acc = 0.0;
            for (u, w) in dirs.iter().zip(ws) {
                let rho = 1.0 / norm.eval(u.as_slice());
                acc += w * rho.powi(n) / f64::from(n);
            }
            acc
        })
        .collect();
    shards.iter().sum()
}
