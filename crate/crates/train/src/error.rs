use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error(transparent)]
    Core(#[from] attnlab::LabError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
