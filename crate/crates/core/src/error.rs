use crate::geometry::Vec3;

/// Errors raised by the solvers, the adjoint passes and the optimizer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point ({}, {}, {}) lies outside the domain", .0.x, .0.y, .0.z)]
    ExteriorPoint(Vec3),

    #[error("radius {r} is outside (0, {radius}] for the ball kernel")]
    KernelDomain { r: f64, radius: f64 },

    #[error("{aborted} of {total} walks exceeded the step limit")]
    MaxStepsExceeded { aborted: u64, total: u64 },

    #[error("diffusion coefficient {value} is not positive at ({}, {})", .at.x, .at.y)]
    NonpositiveAlpha { at: Vec3, value: f64 },

    #[error("replayed walk diverged from the primal trajectory: {0}")]
    ReplayDivergence(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
