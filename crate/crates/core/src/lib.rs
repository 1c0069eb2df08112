//! Price-conditional demand forecasting.
//!
//! A global encoder/decoder transformer over weekly article histories whose
//! output layer is a monotone, piecewise-linear function of the future
//! discount. Around the model sit a synthetic catalog generator, a
//! sales-to-demand imputation step, feature assembly, training with a
//! near/far freeze schedule, demand-grid inference and backtesting.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline runs in `f64` through the aliases below.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod imputation;
pub mod inference;
pub mod io;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Sample64 = features::Sample<f64>;
pub type DemandGrid64 = inference::DemandGrid<f64>;
