use thiserror::Error;

/// Errors surfaced by the solvers and the experiment runner.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("state blow-up on path {path} at step {step}: |x| = {magnitude:.3e}")]
    BlowUp {
        path: usize,
        step: usize,
        magnitude: f64,
    },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown model '{name}'; valid models: {valid}")]
    UnknownModel { name: String, valid: String },

    #[error("unknown pipeline '{name}'; valid pipelines: {valid}")]
    UnknownPipeline { name: String, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("test function support touches the domain boundary (center {center:?}, radius {radius})")]
    SupportTouchesBoundary { center: Vec<f64>, radius: f64 },

    #[error("probe outside grid: {0}")]
    ProbeOutsideGrid(String),

    #[error("degenerate ladder: {0}")]
    DegenerateLadder(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
