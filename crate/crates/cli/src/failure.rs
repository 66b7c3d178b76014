use std::fmt;

use attnlab::LabError;
use attnlab_train::TrainError;

pub const TOLERANCE: u8 = 2;
pub const CONFIG: u8 = 3;
pub const DIVERGENCE: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Tolerance(String),
    Config(String),
    Divergence(String),
    Other(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Tolerance(_) => TOLERANCE,
            Failure::Config(_) => CONFIG,
            Failure::Divergence(_) => DIVERGENCE,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Tolerance(m) => write!(f, "tolerance not met: {m}"),
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Divergence(m) => write!(f, "diverged: {m}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::InvalidArgument(_)
            | LabError::InvalidDistribution(_)
            | LabError::ScaleBound(_)
            | LabError::EnumerationCap { .. } => Failure::Config(e.to_string()),
            LabError::NonFinite(_) => Failure::Divergence(e.to_string()),
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Config(m),
            TrainError::Core(inner) => inner.into(),
            TrainError::Divergence { .. } | TrainError::NonFinite(_) => Failure::Divergence(e.to_string()),
            TrainError::Io(io) => Failure::Other(io.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.into())
    }
}
