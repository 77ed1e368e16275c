use thiserror::Error;

use crate::lgis::LgisError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mode is not a rotation mode (no constant rotation rate V)")]
    NotRotationMode,

    #[error("no closed form for this mode: {0}; use the numeric path")]
    NoClosedForm(String),

    #[error("quadrature did not converge: last estimate {last:?}, previous {previous:?}")]
    QuadratureNonConvergence { last: Vec<f64>, previous: Vec<f64> },

    #[error("singular Fisher matrix, null direction {direction}")]
    SingularFisher { direction: String },

    #[error("estimated width {w_hat} is below the waist {w0}")]
    BelowWaist { w_hat: f64, w0: f64 },

    #[error("width equals the waist, axial derivative vanishes at focus")]
    AtFocus,

    #[error("readout {value} at pixel {pixel} is negative, outside Poisson support")]
    PoissonSupport { pixel: usize, value: f64 },

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error(transparent)]
    Lgis(#[from] LgisError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NotRotationMode => "not_rotation_mode",
            Error::NoClosedForm(_) => "no_closed_form",
            Error::QuadratureNonConvergence { .. } => "quadrature_non_convergence",
            Error::SingularFisher { .. } => "singular_fisher",
            Error::BelowWaist { .. } => "below_waist",
            Error::AtFocus => "at_focus",
            Error::PoissonSupport { .. } => "poisson_support",
            Error::NoSignal(_) => "no_signal",
            Error::FitFailed(_) => "fit_failed",
            Error::Lgis(e) => e.code(),
        }
    }
}
