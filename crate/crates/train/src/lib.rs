//! Gradient-based training of the one-level transformer on the
//! pair-lookup task, with attention confined to a handcrafted mechanism or
//! left free.

pub mod check;
pub mod dump;
mod encoded;
mod error;
pub mod model;
pub mod optim;
pub mod similarity;
pub mod tape;
pub mod train;

pub use encoded::EncodedBatch;
pub use error::{Result, TrainError};
pub use model::{Flavor, ModelParams};
pub use train::{train, train_on, TrainConfig, TrainReport};
