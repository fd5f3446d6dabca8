use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("field length {found} does not match mesh with {expected} nodes")]
    LengthMismatch { expected: usize, found: usize },

    #[error("control value {value} at boundary node {node}, component {component} lies outside U = [{lo}, {hi}]")]
    ControlOutsideU { node: usize, component: usize, value: f64, lo: f64, hi: f64 },

    #[error("non-finite coefficient output in {what} at {location}")]
    NonFinite { what: &'static str, location: String },

    #[error("Newton solve failed at step {step} (dt = {dt}): residual history {residuals:?}")]
    NewtonDivergence { step: usize, dt: f64, residuals: Vec<f64> },

    #[error("singular pivot {pivot:e} at row {row} in banded factorization")]
    SingularMatrix { row: usize, pivot: f64 },

    #[error("path {path}: {source}")]
    Path {
        path: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown coefficient family `{0}` (expected `lq-dbc` or `semilinear-dbc`)")]
    UnknownFamily(String),
}

pub type Result<T> = std::result::Result<T, Error>;
