//! Training and benchmarking of backpropagation against three
//! backpropagation-free algorithms (Forward-Forward, Cascaded Forward and
//! Mono-Forward) under one shared tuning and early-stopping protocol.

pub mod bench;
pub mod data;
pub mod error;
pub mod models;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod search;
pub mod telemetry;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
