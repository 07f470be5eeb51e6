//! Federated learning simulator with server-side automatic structured pruning.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod plot;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
