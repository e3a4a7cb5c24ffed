use thiserror::Error;

use crate::autodiff::TapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("round {h}: transition row {row} is not a distribution (sum {sum}, min {min})")]
    KernelNotStochastic { h: usize, row: usize, sum: f64, min: f64 },
    #[error("round {h}: population mass {value} at entry {index} is negative")]
    NegativeMass { h: usize, index: usize, value: f64 },
    #[error("entropy temperature must be nonnegative, got {0}")]
    NegativeTemperature(f64),
    #[error("step size {eta} with temperature {tau} violates eta * tau <= 1")]
    StepTooLarge { eta: f64, tau: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("logits became non-finite at OMD step {step}")]
    DivergedLogits { step: usize },
    #[error("mechanism produced a negative payment {value} at bid {bid}")]
    NegativePayment { bid: usize, value: f64 },
    #[error("allocation exceeds the budget: sold {sold} items, cap {cap}")]
    BudgetExceeded { sold: usize, cap: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
