use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no solid material")]
    NoSolidMaterial,

    #[error("repair did not converge after {0} iterations")]
    RepairDidNotConverge(usize),

    #[error("numerical overflow in {0}")]
    NumericalOverflow(String),

    #[error("empty generation")]
    EmptyGeneration,

    #[error("generator failed manufacturability after {0} tries")]
    GeneratorFailed(usize),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("open mesh: column ({x}, {y}) has an odd crossing count")]
    OpenMesh { x: usize, y: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
