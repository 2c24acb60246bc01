//! Numerical toolkit for monochromatic Finsler metrics.
//!
//! Decides whether a Finsler metric given on a chart (box or flat torus) is
//! monochromatic — all tangent spaces pairwise linearly isometric as normed
//! spaces — and, when it is, constructs and verifies an affine connection
//! whose parallel transport preserves the Finsler function.
//!
//! The pipeline:
//!
//! 1. [`norms`] evaluates Minkowski norms (Euclidean, Randers, translated
//!    ellipsoids, pullbacks) and their gradients.
//! 2. [`blmetric`] averages second moments over unit balls to produce the
//!    Binet-Legendre metric and its Cholesky frames; norm isometries become
//!    orthogonal matrices in these frames.
//! 3. [`isometry`] computes the isotropy algebra of a norm, selects anchor
//!    vectors, and searches O(n) for isometries certified by the integral
//!    defect `phi(T) = int_K |F_A - F_B o T| dvol`.
//! 4. [`connection`] continues the isometry family over the grid by Newton
//!    iteration, forms `Gamma_i = -d_i B B^{-1}`, and verifies preservation
//!    along curves by RK4 parallel transport; curvature and holonomy give
//!    independent consistency checks.
//! 5. [`fields`] holds the torus constructions (rotating translated balls,
//!    rotation fields) together with their analytic connections, used as
//!    ground truth.
//!
//! The `berwald` binary drives everything from a JSON config; see the
//! repository README.

pub mod blmetric;
pub mod config;
pub mod connection;
pub mod error;
pub mod expr;
pub mod fields;
pub mod grid;
pub mod isometry;
pub mod norms;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod rng;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::DMatrix;

    /// Random invertible matrix with singular values in a moderate band.
    pub fn random_well_conditioned(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> DMatrix<f64> {
        loop {
            let a = DMatrix::from_fn(n, n, |_, _| crate::rng::normal_vector(rng, 1)[0]);
            let svd = a.clone().svd(false, false);
            let smin = svd.singular_values.min();
            let smax = svd.singular_values.max();
            if smin > 0.35 && smax < 3.0 {
                return a;
            }
        }
    }
}
