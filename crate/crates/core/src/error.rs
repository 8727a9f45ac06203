use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unphysical covariance: minimum symplectic eigenvalue {min_nu:.3e} < 1/2")]
    Unphysical { min_nu: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },

    /// Covariance norm crossed the divergence threshold or grew without bound.
    #[error("covariance flow diverged at t = {time:.4} (1/omega_m): {reason}")]
    Instability { time: f64, reason: String },

    #[error("no periodic convergence after {periods} periods (last residual {residual:.3e})")]
    NonConvergence { periods: usize, residual: f64 },

    #[error("system is not controllable with the configured feedback: {0}")]
    Uncontrollable(String),

    #[error("sampling grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("trajectory with seed index {index} failed: {source}")]
    Trajectory {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error{}: key `{key}`: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        key: String,
        message: String,
    },

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// Short class label used in scan failure lists and manifests.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Unphysical { .. } => "unphysical",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::Instability { .. } => "unstable",
            Error::NonConvergence { .. } => "unconverged",
            Error::Uncontrollable(_) => "uncontrollable",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::Trajectory { source, .. } => source.class(),
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }
}
