//! Dual-model latent reasoning over an augmented key/value cache.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod interp;
pub mod latent;
pub mod model;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
