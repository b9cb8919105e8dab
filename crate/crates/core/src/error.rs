use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the upscaling and time-stepping pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("fine grid size {fine_n} is not a multiple of coarse grid size {coarse_n}")]
    NonNestedMesh { fine_n: usize, coarse_n: usize },

    #[error("invalid block id {block} (mesh has {num_blocks} blocks)")]
    InvalidBlock { block: usize, num_blocks: usize },

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("continuum {continuum} not represented in block {block}")]
    ContinuumMissing { continuum: usize, block: usize },

    #[error("continua are linearly dependent in block {block}")]
    DependentContinua { block: usize },

    #[error("matrix is not symmetric positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("constraint matrix is rank deficient")]
    RankDeficient,

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact {}: run the `{stage}` stage first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_block(self, block: usize) -> Self {
        match self {
            e @ Error::Block { .. } => e,
            e => Error::Block {
                block,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
