use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid norm: {0}")]
    InvalidNorm(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("gradient undefined at the origin")]
    GradientAtOrigin,

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("near-singular matrix (condition number {cond:.3e} exceeds {limit:.3e}): {context}")]
    IllConditioned {
        cond: f64,
        limit: f64,
        context: String,
    },

    #[error("isotropy solve underdetermined: {samples} samples for so({n}) (need at least {needed})")]
    Underdetermined {
        samples: usize,
        n: usize,
        needed: usize,
    },

    #[error("anchor selection failed to reach rank {target} after {draws} draws (reached {reached})")]
    AnchorRankDeficient {
        target: usize,
        reached: usize,
        draws: usize,
    },

    #[error("Newton did not converge at grid point {point:?} after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged {
        point: Vec<f64>,
        iters: usize,
        residual: f64,
    },

    #[error("isometry certificate failed at grid point {point:?}: defect {defect:.3e} exceeds tolerance {tol:.3e} (field not monochromatic, or grid too coarse for continuation)")]
    CertificateFailed {
        point: Vec<f64>,
        defect: f64,
        tol: f64,
    },

    #[error("curve leaves the chart at t = {t:.6} (point {point:?})")]
    CurveExitsChart { t: f64, point: Vec<f64> },

    #[error("vector field vanishes at grid point {point:?}")]
    VanishingVectorField { point: Vec<f64> },

    #[error("chart error: {0}")]
    Chart(String),

    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ExprError),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
