//! Kriging surrogates over semantic vectors, with optional PLS reduction of
//! the kernel's length-scale parameters.

mod kernel;
mod model;
mod pls;

pub use kernel::kernel;
pub use model::{KernelKind, KplsModel, ModelDump, Prediction, SurrogateConfig};
pub use pls::{pls_directions, PlsProjection};

#[derive(Debug, thiserror::Error)]
pub enum SurrogateError {
    #[error("need at least 2 distinct training points, got {0}")]
    InsufficientData(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite value in surrogate input")]
    NonFinite,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("correlation matrix not positive definite even with nugget {0:e}")]
    Factorization(f64),
    #[error("invalid surrogate config: {0}")]
    Config(String),
}
