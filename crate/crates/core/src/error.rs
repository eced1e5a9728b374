use std::path::PathBuf;

use nalgebra::DMatrix;
use thiserror::Error;

/// Errors raised by grid construction, assembly, the Riccati solvers and the
/// verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gamma = {gamma} is infeasible: {reason}")]
    GammaInfeasible { gamma: f64, reason: String },

    #[error("stable subspace basis is degenerate (condition number {condition:.3e})")]
    SubspaceDegenerate { condition: f64 },

    #[error("Newton iteration diverged after {iterations} steps (residual {residual:.3e})")]
    NewtonDiverged {
        iterations: usize,
        residual: f64,
        last: Box<DMatrix<f64>>,
    },

    #[error("no feasible gamma in bracket [{lo}, {hi}]")]
    NoFeasibleGamma { lo: f64, hi: f64 },

    #[error("closed loop is unstable (spectral abscissa {abscissa:.6e})")]
    ClosedLoopUnstable { abscissa: f64 },

    #[error("simulation blew up at step {step} (norm {norm:.3e})")]
    Unstable { step: usize, norm: f64 },

    #[error("adjoint trajectory does not decay (fitted rate {rate:.3e})")]
    DetectabilityViolated { rate: f64 },

    #[error("solution failed certification: {0}")]
    NotCertified(String),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
