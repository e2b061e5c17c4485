use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("derivative order ({m}, {n}) exceeds the supported maximum {max}")]
    UnsupportedOrder { m: usize, n: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("gram matrix is ill-conditioned at theta={theta:?}, beta={beta:?}")]
    IllConditioned { theta: Vec<f64>, beta: Vec<f64> },

    #[error("rejection sampler starved: acceptance rate {rate:.3e} after {proposals} proposals")]
    SamplerStarvation { rate: f64, proposals: u64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("integration failed at t={t}: non-finite state")]
    Integration { t: f64 },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. }
                | Error::SamplerStarvation { .. }
                | Error::Integration { .. }
                | Error::Optimization(_)
        )
    }
}
