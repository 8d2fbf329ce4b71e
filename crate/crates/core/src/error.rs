use thiserror::Error;

/// Errors produced anywhere in the simulator, trainer or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible pilot pattern: {n_u} users need at least {n_u} subcarriers, grid has {n_f}")]
    InfeasiblePattern { n_f: usize, n_u: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: non-finite loss at iteration {iteration} (lr = {lr})")]
    NonFiniteLoss { iteration: usize, lr: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
