use thiserror::Error;

/// Errors raised by the geometry, solver and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unresolved hole: radius {radius:.3e} is below 2h = {two_h:.3e}")]
    UnresolvedHole { radius: f64, two_h: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64, trace: Vec<f64> },

    #[error("CFL violation: outflow number {cfl:.4} exceeds {limit}")]
    CflViolation { cfl: f64, limit: f64 },

    #[error("extrapolation unstable: C(r)/r changes by {change:.1}% between the two smallest radii")]
    ExtrapolationUnstable { change: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerical solvers, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::CflViolation { .. }
                | Error::ExtrapolationUnstable { .. }
                | Error::Invariant(_)
        )
    }
}
