use thiserror::Error;

/// Errors raised by the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    Structure(String),

    #[error("load at bus {bus} has zero impedance")]
    SingularLoad { bus: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("filter time constants are not homogeneous: inverter {inverter} (bus {bus}) has {value} vs reference {reference}")]
    HeterogeneousFilters {
        inverter: usize,
        bus: u32,
        value: f64,
        reference: f64,
    },

    #[error("matrix is singular or near-singular ({what}); condition estimate {cond:e}")]
    Singular { what: String, cond: f64 },

    #[error("no equilibrium: {0}")]
    NoEquilibrium(String),

    #[error("certificate infeasible: {0}")]
    CertificateInfeasible(String),

    #[error("decentralized gain bounds need nu_i < 0, but inverter {inverter} has nu = {nu}")]
    NuNotNegative { inverter: usize, nu: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    #[error("integration aborted at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
