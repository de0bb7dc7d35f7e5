use std::path::PathBuf;

use thiserror::Error;

use crate::meta_opt::MetaTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("singular effective geometry: {0}")]
    SingularGeometry(String),

    #[error("near-singular rank-one update (denominator {denominator:e})")]
    NearSingularUpdate { denominator: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("layer has no projector")]
    MissingProjector,

    #[error("target class {class} out of range for {classes} classes")]
    TargetOutOfRange { class: usize, classes: usize },

    #[error("gradient oracle did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("non-finite value at iteration {iteration}")]
    Divergence {
        iteration: usize,
        trace: Option<Box<MetaTrace>>,
    },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("target weight is annihilated by the projector (norm {norm:e})")]
    AnnihilatedTarget { norm: f64 },

    #[error("last-layer channel vanishes (norm {norm:e})")]
    VanishingChannel { norm: f64 },

    #[error("edit {edit_id} failed")]
    Edit {
        edit_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numbers during iteration.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::Edit { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
