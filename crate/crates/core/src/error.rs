use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("GA protocol error: {0}")]
    Protocol(String),

    #[error("fitness evaluation failed for genotype {genotype}: {source}")]
    Fitness {
        genotype: String,
        #[source]
        source: Box<Error>,
    },

    #[error("adapter does not support this operation: {0}")]
    AdapterUnsupported(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },

    #[error("class {class} has {count} sample(s); at least 2 are required for a covariance")]
    Moments { class: usize, count: usize },

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("problem of size {size} exceeds the exact solver cap of {cap}; use the sinkhorn solver")]
    ExactSolverCap { size: usize, cap: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("no runs found in {}", .0.display())]
    NoRuns(PathBuf),

    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
