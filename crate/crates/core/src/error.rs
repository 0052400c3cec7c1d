use thiserror::Error;

/// Crate-level error type; wraps the per-module failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Fem(#[from] crate::fem::FemError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Decomp(#[from] crate::decomp::DecompError),
    #[error(transparent)]
    Reduced(#[from] crate::reduced::ReducedError),
    #[error(transparent)]
    Estimate(#[from] crate::estimate::EstimateError),
    #[error(transparent)]
    Adapt(#[from] crate::adapt::AdaptError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
