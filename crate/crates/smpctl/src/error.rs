use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("assumption {name} fails with margin {margin:e} at {sample}")]
    Assumption { name: String, margin: f64, sample: String },

    #[error("malformed {file}: {message}")]
    Input { file: String, message: String },

    #[error(transparent)]
    Core(#[from] smp_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cannot build thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}
