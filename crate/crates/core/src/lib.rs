//! Numerical laboratory for one-level transformers that predict functionals of
//! adjacent-token category pairs.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense row-major matrices, activations, layer normalisation.
//! - [`rng`]: seeded, splittable random streams.
//! - [`context`]: token sequences, their one-hot encoding and pair targets.
//! - [`attention`]: self-attention with and without softmax, in the column
//!   convention `attn^t = v · X · weights`.
//! - [`handcrafted`]: the three hand-programmed parameterisations and the
//!   full one-level pipeline.
//! - [`stationarity`]: closed-form expected-loss gradients, stationary
//!   families and their enumeration / Monte-Carlo / finite-difference oracles.

pub mod attention;
pub mod context;
pub mod error;
pub mod handcrafted;
pub mod linalg;
pub mod report;
pub mod rng;
pub mod stationarity;

pub use error::{LabError, Result};
pub use linalg::Mat;
pub use rng::Rng;
