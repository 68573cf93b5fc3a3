use thiserror::Error;

/// Errors surfaced by the construction pipeline.
///
/// Numerical failures are never silent: anything that would invalidate a
/// downstream quantity (overflow clamps, non-convergence, constraint
/// violations) is reported through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("point ({0:.6}, {1:.6}) lies outside the domain (signed distance {2:.3e})")]
    OutsideDomain(f64, f64, f64),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("compatibility defect {defect:.3e} exceeds {tol:.3e} in the zero-mean solve; \
             quadrature of the logarithmic data is suspect")]
    Incompatible { defect: f64, tol: f64 },

    #[error("source point too close to the boundary for an interior chart (dist {0:.3e})")]
    ChartPlacement(f64),

    #[error("weight must be positive at bubble locations; V({0:.4}, {1:.4}) = {2:.3e}")]
    NonpositiveWeight(f64, f64, f64),

    #[error("exponent clamp engaged (max argument {0:.2} > 60); result unusable")]
    ExponentClamp(f64),

    #[error("fixed-point iteration did not contract (last ratio {0:.3})")]
    NoContraction(f64),

    #[error("Krylov iteration stalled: residual {0:.3e} after {1} iterations")]
    KrylovStall(f64, usize),

    #[error("admissible-set boundary reached: {0}")]
    AdmissibleBoundary(String),

    #[error("optimizer did not converge: |grad| = {0:.3e} after {1} iterations")]
    NoConvergence(f64, usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
