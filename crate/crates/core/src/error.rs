use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("length mismatch in {op}: expected {expected}, got {got}")]
    Length {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid category distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("q-true table violates the extraction bound: {0}")]
    ScaleBound(String),

    #[error("enumeration of {contexts} contexts exceeds the cap of {cap}; use the monte-carlo oracle instead")]
    EnumerationCap { contexts: f64, cap: usize },
}
