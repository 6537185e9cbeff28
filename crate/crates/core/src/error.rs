use thiserror::Error;

pub type Result<T, E = QsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QsdError {
    #[error("invalid basis: dimension {0} is below the minimum of 2")]
    InvalidBasis(usize),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("state is not normalized (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("degenerate state: norm is zero or not finite")]
    DegenerateState,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("numerical instability at t = {t} with dt = {dt}: non-finite amplitudes")]
    Instability { t: f64, dt: f64 },

    #[error("classical integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("displacement ({dq}, {dp}) exceeds the per-application cap {cap}; subdivide the shift")]
    ShiftTooLarge { dq: f64, dp: f64, cap: f64 },

    #[error("truncation growth limit: state needs more than the maximum of {max} basis states")]
    TruncationLimit { max: usize },

    #[error("density matrix invariant violated ({what}); the basis is too small, increase the dimension")]
    TruncationTooSmall { what: String },

    #[error("linearized closure breakdown at t = {t}: {what}")]
    ClosureBreakdown { t: f64, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("trajectory {index} failed at t = {t}: {source}")]
    Trajectory {
        index: usize,
        t: f64,
        source: Box<QsdError>,
    },
}

impl QsdError {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            QsdError::Instability { .. }
            | QsdError::Divergence { .. }
            | QsdError::ShiftTooLarge { .. }
            | QsdError::TruncationLimit { .. }
            | QsdError::TruncationTooSmall { .. }
            | QsdError::ClosureBreakdown { .. }
            | QsdError::NotNormalized { .. }
            | QsdError::DegenerateState => true,
            QsdError::Trajectory { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        QsdError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
